"""Student groups: a shared trunk (possibly empty) feeding m per-student branches."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, ops, softmax_with_temperature
from .distillation import AttentionProjector

BRANCH_BASED = "branch_based"
NETWORK_BASED = "network_based"
CHECKPOINT_VERSION = 1

# component tags mixed into the seed sequence
_TRUNK, _STUDENT, _PROJECTOR = 0, 1, 2


class LayerSpecError(ValueError):
    pass


@dataclass
class StudentGroupConfig:
    m: int
    input_shape: tuple[int, ...]
    num_classes: int
    mode: str = BRANCH_BASED
    trunk_spec: tuple[str, ...] = ("linear:64", "relu")
    branch_spec: tuple[str, ...] = ("linear:64", "relu")
    feature_dim: int = 64
    proj_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.trunk_spec = tuple(self.trunk_spec)
        self.branch_spec = tuple(self.branch_spec)
        if self.m < 2:
            raise ValueError(f"a group needs m >= 2 students, got m={self.m}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.mode not in (BRANCH_BASED, NETWORK_BASED):
            raise ValueError(f"unknown group mode {self.mode!r}")
        if self.proj_dim is None:
            self.proj_dim = self.feature_dim

    @property
    def num_peers(self) -> int:
        return self.m - 1


def mlp_config(input_dim: int, num_classes: int, m: int = 4, hidden: int = 64, **kw) -> StudentGroupConfig:
    feature_dim = kw.pop("feature_dim", 64)
    return StudentGroupConfig(
        m=m,
        input_shape=(input_dim,),
        num_classes=num_classes,
        trunk_spec=(f"linear:{hidden}", "relu"),
        branch_spec=(f"linear:{feature_dim}", "relu"),
        feature_dim=feature_dim,
        **kw,
    )


def cnn_config(input_shape: Sequence[int], num_classes: int, m: int = 4, **kw) -> StudentGroupConfig:
    feature_dim = kw.pop("feature_dim", 64)
    return StudentGroupConfig(
        m=m,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        trunk_spec=("conv:8", "relu", "maxpool"),
        branch_spec=("conv:16", "relu", "maxpool", "flatten", f"linear:{feature_dim}", "relu"),
        feature_dim=feature_dim,
        **kw,
    )


# --- layers ---------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Layer:
    kind: str
    params: list[Tensor] = field(default_factory=list)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "linear":
            return ops.bias_add(ops.matmul(x, self.params[0]), self.params[1])
        if self.kind == "conv":
            return ops.conv2d(x, self.params[0], self.params[1], padding=1)
        if self.kind == "relu":
            return ops.relu(x)
        if self.kind == "maxpool":
            return ops.maxpool2x2(x)
        if self.kind == "flatten":
            return ops.flatten(x)
        raise LayerSpecError(f"unknown layer kind {self.kind!r}")


def build_layers(
    spec: Sequence[str], in_shape: tuple[int, ...], rng: np.random.Generator, where: str
) -> tuple[list[Layer], tuple[int, ...]]:
    """Instantiate ``spec`` for inputs of ``in_shape`` (batch axis excluded)."""
    layers = []
    shape = in_shape
    for i, item in enumerate(spec):
        kind, _, arg = item.partition(":")
        tag = f"{where} layer {i} ({item!r})"
        if kind == "linear":
            if len(shape) != 1 or not arg.isdigit():
                raise LayerSpecError(f"{tag}: needs a flat input and a width, input is {shape}")
            width = int(arg)
            w = Tensor(_uniform(rng, (shape[0], width), shape[0]), requires_grad=True)
            layers.append(Layer("linear", [w, Tensor(np.zeros(width), requires_grad=True)]))
            shape = (width,)
        elif kind == "conv":
            if len(shape) != 3 or not arg.isdigit():
                raise LayerSpecError(f"{tag}: needs [C,H,W] input and a channel count, input is {shape}")
            out_c, fan_in = int(arg), shape[0] * 9
            w = Tensor(_uniform(rng, (out_c, shape[0], 3, 3), fan_in), requires_grad=True)
            layers.append(Layer("conv", [w, Tensor(np.zeros(out_c), requires_grad=True)]))
            shape = (out_c, shape[1], shape[2])
        elif kind == "maxpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise LayerSpecError(f"{tag}: needs [C,H,W] with even H, W, input is {shape}")
            layers.append(Layer("maxpool"))
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            layers.append(Layer("flatten"))
            shape = (int(np.prod(shape)),)
        elif kind == "relu":
            layers.append(Layer("relu"))
        else:
            raise LayerSpecError(f"{tag}: unknown layer kind {kind!r}")
    return layers, shape


class Student:
    """Feature extractor tail plus a linear classifier."""

    def __init__(self, layers: list[Layer], head: Layer):
        self.layers = layers
        self.head = head

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            x = layer(x)
        return x, self.head(x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params] + list(self.head.params)


def build_network(
    spec: Sequence[str], in_shape: tuple[int, ...], num_classes: int, rng: np.random.Generator, where: str
) -> tuple[Student, tuple[int, ...]]:
    layers, shape = build_layers(spec, in_shape, rng, where)
    if len(shape) != 1:
        raise LayerSpecError(f"{where}: features must be flat before the classifier, got {shape}")
    head, _ = build_layers([f"linear:{num_classes}"], shape, rng, f"{where} classifier")
    return Student(layers, head[0]), shape


# --- group ----------------------------------------------------------------

@dataclass
class GroupForwardOutput:
    features: list[Tensor]
    logits: list[Tensor]
    q: list[Tensor]
    q_prime: list[Tensor]

    @property
    def m(self) -> int:
        return len(self.logits)


class StudentGroup:
    def __init__(self, config: StudentGroupConfig, trunk: list[Layer], students: list[Student],
                 projector: AttentionProjector):
        self.config = config
        self.trunk = trunk
        self.students = students
        self.projector = projector

    @property
    def m(self) -> int:
        return len(self.students)

    @property
    def leader(self) -> Student:
        return self.students[-1]

    def trunk_parameters(self) -> list[Tensor]:
        return [p for layer in self.trunk for p in layer.params]

    def student_parameters(self, a: int) -> list[Tensor]:
        return self.students[a].parameters()

    def parameters(self, include_projector: bool = True) -> list[Tensor]:
        params = self.trunk_parameters()
        for s in self.students:
            params += s.parameters()
        if include_projector:
            params += self.projector.parameters()
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.trunk):
            for j, p in enumerate(layer.params):
                named[f"trunk.{i}.{j}"] = p
        for a, s in enumerate(self.students):
            for i, layer in enumerate(s.layers):
                for j, p in enumerate(layer.params):
                    named[f"student{a}.{i}.{j}"] = p
            for j, p in enumerate(s.head.params):
                named[f"student{a}.head.{j}"] = p
        named["projector.W_L"] = self.projector.W_L
        named["projector.W_E"] = self.projector.W_E
        return named


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def build_group(config: StudentGroupConfig) -> StudentGroup:
    """Deterministic construction; every student draws from its own sub-seed."""
    if config.mode == BRANCH_BASED:
        trunk, trunk_out = build_layers(config.trunk_spec, config.input_shape, _rng(config.seed, _TRUNK), "trunk")
        branch_spec = config.branch_spec
    else:
        trunk, trunk_out = [], config.input_shape
        branch_spec = config.trunk_spec + config.branch_spec
    students = []
    for a in range(config.m):
        student, feat_shape = build_network(
            branch_spec, trunk_out, config.num_classes, _rng(config.seed, _STUDENT, a), f"student {a}"
        )
        if feat_shape != (config.feature_dim,):
            raise LayerSpecError(
                f"student {a}: branch produces features of shape {feat_shape}, "
                f"expected ({config.feature_dim},)"
            )
        students.append(student)
    projector = AttentionProjector.init(config.feature_dim, config.proj_dim, _rng(config.seed, _PROJECTOR))
    return StudentGroup(config, trunk, students, projector)


def forward_trunk(group: StudentGroup, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[1:] != group.config.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match group input {group.config.input_shape}")
    for layer in group.trunk:
        x = layer(x)
    return x


def forward_group(group: StudentGroup, x, T: float) -> GroupForwardOutput:
    shared = forward_trunk(group, x)
    features, logits, q, q_prime = [], [], [], []
    for student in group.students:
        h, g = student(shared)
        features.append(h)
        logits.append(g)
        q.append(softmax_with_temperature(g, 1.0))
        q_prime.append(softmax_with_temperature(g, T))
    return GroupForwardOutput(features, logits, q, q_prime)


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(group: StudentGroup, path: str | Path) -> Path:
    path = Path(path)
    arrays = {name: p.data for name, p in group.named_parameters().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(group.config)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> StudentGroup:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
        group = build_group(StudentGroupConfig(**meta["config"]))
        named = group.named_parameters()
        missing = set(named) - set(data.files)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
        for name, p in named.items():
            if data[name].shape != p.shape:
                raise ValueError(f"{path}: parameter {name} has shape {data[name].shape}, expected {p.shape}")
            p.data = data[name].astype(np.float64)
    return group
