"""Optimizer, schedules and the training loops for every method."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import distillation as D
from .autodiff import Tensor, backward, cross_entropy, no_grad, ops, softmax_with_temperature
from .data import Dataset, batch_iter
from .metrics import ExperimentReport, ensemble_error, peer_diversity, report_columns, top1_error
from .models import Student, StudentGroup, forward_group, forward_trunk

ABLATIONS = ("random", "self_only", "mean", "identity_asymmetry", "no_two_level")
METHODS = ("okddip", "independent", "okddip_plus_kd", "kd_only") + tuple(f"ablation:{k}" for k in ABLATIONS)
TEACHER_METHODS = ("okddip_plus_kd", "kd_only")


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingDivergedError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple[int, ...] = (50, 75)
    lr_drop_factor: float = 0.1
    T: float = 3.0
    rampup_epochs: int = 25
    seed: int = 0
    method: str = "okddip"
    detach_targets: bool = True
    aggregate_logits: bool = False

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.lr_drop_epochs, self.lr_drop_epochs[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {self.lr_drop_epochs}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rampup_epochs < 0:
            raise ValueError("rampup_epochs must be >= 0")

    @property
    def ablation(self) -> str | None:
        return self.method.split(":", 1)[1] if self.method.startswith("ablation:") else None


FULL_SCHEDULE = dict(epochs=300, lr_drop_epochs=(150, 225), rampup_epochs=75)


# --- optimizer ------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_nesterov_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place Nesterov SGD with L2 weight decay; parameters without a gradient are skipped."""
    if len(state.velocity) != len(params):
        raise ValueError(f"optimizer state holds {len(state.velocity)} buffers for {len(params)} parameters")
    for i, (p, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i} {p.shape}")
        g = grad + weight_decay * p.data if weight_decay else grad
        v = state.velocity[i]
        v *= momentum
        v += g
        p.data = p.data - lr * (g + momentum * v)


def lr_at(epoch: int, config: TrainConfig) -> float:
    k = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.lr0 * config.lr_drop_factor ** k


def rampup_weight(epoch: float, rampup_epochs: int) -> float:
    """Gaussian ramp exp(-5 (1 - t)^2) with t = min(epoch / rampup_epochs, 1)."""
    if rampup_epochs <= 0:
        return 1.0
    t = min(max(epoch, 0) / rampup_epochs, 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


# --- per-method losses -----------------------------------------------------

def trainable_parameters(group: StudentGroup, method: str) -> list[Tensor]:
    params = group.trunk_parameters()
    students = range(group.m - 1) if method == "ablation:no_two_level" else range(group.m)
    for a in students:
        params += group.student_parameters(a)
    if method in ("okddip", "okddip_plus_kd", "ablation:no_two_level"):
        params += group.projector.parameters()
    return params


def batch_loss(
    group: StudentGroup,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    rampup: float,
    teacher_logits: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, D.LossBreakdown]:
    T = config.T
    out = forward_group(group, x, T)
    method = config.method
    if method in TEACHER_METHODS and teacher_logits is None:
        raise ValueError(f"method {method} needs teacher logits")

    if method == "independent":
        ces = [cross_entropy(q, y) for q in out.q]
        total = ops.add_n(ces)
        return total, D.LossBreakdown([c.item() for c in ces], 0.0, 0.0, 0.0, 0.0, total.item())

    if method == "kd_only":
        ces = [cross_entropy(q, y) for q in out.q]
        kds = [D.kd_term(qp, teacher_logits, T) for qp in out.q_prime]
        total = ops.add(ops.add_n(ces), ops.add_n(kds))
        kd = sum(k.item() for k in kds)
        return total, D.LossBreakdown([c.item() for c in ces], 0.0, 0.0, kd, 0.0, total.item())

    P = group.m - 1
    kind = config.ablation
    if kind in (None, "no_two_level"):
        alpha = D.attention_weights(D.stack_peers(out.features[:P]), group.projector)
    elif kind == "identity_asymmetry":
        alpha = D.ablation_weights(kind, len(y), P, features=D.stack_peers(out.features[:P]))
    else:
        alpha = D.ablation_weights(kind, len(y), P, rng=rng)
    total, parts = D.okddip_total_loss(
        out, y, alpha, T, rampup,
        detach_targets=config.detach_targets,
        aggregate_logits=config.aggregate_logits,
        two_level=kind != "no_two_level",
    )
    if method == "okddip_plus_kd":
        kds = [D.kd_term(qp, teacher_logits, T) for qp in out.q_prime]
        total = ops.add(total, ops.add_n(kds))
        parts.kd = sum(k.item() for k in kds)
        parts.total = total.item()
    return total, parts


def teacher_forward(teacher: Student, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return teacher(Tensor(x))[1].data


def train_epoch(
    group: StudentGroup,
    train: Dataset,
    config: TrainConfig,
    epoch: int,
    rampup: float,
    state: OptimizerState,
    params: list[Tensor],
    teacher: Student | None = None,
    augment: bool = False,
) -> dict[str, float]:
    """One pass over ``train``; returns batch-averaged loss components."""
    lr = lr_at(epoch, config)
    sums: dict[str, float] = {}
    n_batches = 0
    for b, (x, y, _) in enumerate(batch_iter(train, config.batch_size, config.seed, epoch, augment)):
        t_logits = teacher_forward(teacher, x) if teacher is not None else None
        rng = np.random.default_rng([config.seed, epoch, b, 7])
        loss, parts = batch_loss(group, x, y, config, rampup, t_logits, rng)
        if not math.isfinite(parts.total):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}: {parts}")
        for p in params:
            p.grad = None
        backward(loss)
        try:
            sgd_nesterov_step(params, [p.grad for p in params], state, lr,
                              config.momentum, config.weight_decay)
        except NonFiniteGradientError as exc:
            raise NonFiniteGradientError(f"epoch {epoch}, batch {b}: {exc}") from exc
        row = {"loss_total": parts.total, "dis1": parts.dis1, "dis2": parts.dis2, "kd": parts.kd}
        ce = parts.ce + [0.0] * (group.m - len(parts.ce))
        row.update({f"ce_{a}": c for a, c in enumerate(ce)})
        for k, v in row.items():
            sums[k] = sums.get(k, 0.0) + v
        n_batches += 1
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


# --- evaluation ------------------------------------------------------------

def predict_group(group: StudentGroup, dataset: Dataset, batch_size: int = 1000) -> np.ndarray:
    """T=1 probabilities of every student, shape [m, n, classes]."""
    chunks = []
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            shared = forward_trunk(group, Tensor(dataset.inputs[i:i + batch_size]))
            chunks.append(np.stack([
                softmax_with_temperature(s(shared)[1], 1.0).data for s in group.students
            ]))
    return np.concatenate(chunks, axis=1)


def reported_error(method: str, errors: Sequence[float]) -> float:
    if method in ("independent", "kd_only"):
        return float(np.mean(errors))
    if method == "ablation:no_two_level":
        return float(errors[0])
    return float(errors[-1])


def evaluate_group(group: StudentGroup, dataset: Dataset, method: str = "okddip") -> dict[str, float]:
    probs = predict_group(group, dataset)
    errors = [top1_error(p, dataset.labels) for p in probs]
    peers = probs[:-1]
    row = {f"err_{a}": e for a, e in enumerate(errors)}
    row["leader_error"] = errors[-1]
    row["reported_error"] = reported_error(method, errors)
    row["ensemble_error"] = ensemble_error(peers, dataset.labels)
    row["diversity"] = peer_diversity(peers) if len(peers) >= 2 else 0.0
    return row


# --- runs ------------------------------------------------------------------

REPORT_NOTES = {
    "init": "uniform(+-sqrt(6/fan_in)) weights, zero biases; attention projections uniform(+-1/sqrt(feature_dim))",
    "rampup": "exp(-5(1-min(epoch/rampup_epochs,1))^2), evaluated once per epoch",
    "diversity": "mean pairwise L2 distance of T=1 predictions over auxiliary peers (students 0..m-2)",
    "ensemble": "mean of T=1 predictions over auxiliary peers (students 0..m-2)",
    "reported_error": "leader for okddip variants, student 0 for ablation:no_two_level, student mean otherwise",
}


def train_run(
    group: StudentGroup,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    teacher: Student | None = None,
    augment: bool | None = None,
    header: dict | None = None,
) -> tuple[StudentGroup, ExperimentReport]:
    """Train ``group`` in place with ``config.method`` and record one report row per epoch."""
    if train.input_shape != group.config.input_shape:
        raise ValueError(f"dataset inputs {train.input_shape} do not fit group inputs {group.config.input_shape}")
    if config.method in TEACHER_METHODS and teacher is None:
        raise ValueError(f"method {config.method} needs a teacher")
    if augment is None:
        augment = train.is_image
    params = trainable_parameters(group, config.method)
    state = OptimizerState.for_params(params)
    full_header = {
        "train_config": dataclasses.asdict(config),
        "group_config": dataclasses.asdict(group.config),
        "seed": config.seed,
        "augment": augment,
        "notes": REPORT_NOTES,
    }
    full_header.update(header or {})
    report = ExperimentReport(full_header, report_columns(group.m))
    for epoch in range(config.epochs):
        rampup = rampup_weight(epoch, config.rampup_epochs)
        losses = train_epoch(group, train, config, epoch, rampup, state, params, teacher, augment)
        row = {"epoch": epoch, "lr": lr_at(epoch, config), "rampup": rampup}
        row.update(losses)
        row.update(evaluate_group(group, test, config.method))
        report.add_row(row)
    return group, report


def train_teacher(
    teacher: Student, train: Dataset, config: TrainConfig, augment: bool | None = None
) -> Student:
    """Plain cross-entropy training of a single network with the same optimizer and schedule."""
    if augment is None:
        augment = train.is_image
    params = teacher.parameters()
    state = OptimizerState.for_params(params)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for x, y, _ in batch_iter(train, config.batch_size, config.seed, epoch, augment):
            for p in params:
                p.grad = None
            loss = cross_entropy(softmax_with_temperature(teacher(Tensor(x))[1], 1.0), y)
            backward(loss)
            sgd_nesterov_step(params, [p.grad for p in params], state, lr, config.momentum, config.weight_decay)
    return teacher
