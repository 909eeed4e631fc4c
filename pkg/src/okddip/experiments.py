"""Experiment assembly: flat config files, datasets, teachers and single runs."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import Dataset
from .metrics import ExperimentReport
from .models import (
    Student,
    StudentGroup,
    StudentGroupConfig,
    build_group,
    build_network,
    cnn_config,
    mlp_config,
)
from .training import TEACHER_METHODS, TrainConfig, train_run, train_teacher


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig(TrainConfig):
    """TrainConfig plus the group, data and teacher settings a run needs."""

    m: int = 4
    mode: str = "branch_based"
    arch: str = "mlp"
    hidden: int = 64
    feature_dim: int = 64
    dataset: str = "gaussian"
    num_classes: int = 10
    samples_per_class: int = 600
    input_dim: int = 32
    class_separation: float = 2.5
    test_fraction: float = 1 / 6
    data_seed: int = -1  # -1: reuse seed
    data_path: str = ""
    augment: str = "auto"  # auto | on | off
    teacher_hidden: int = 256
    teacher_epochs: int = -1  # -1: reuse epochs

    def __post_init__(self):
        super().__post_init__()
        if self.arch not in ("mlp", "cnn"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.dataset not in ("gaussian", "idx", "cifar"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.augment not in ("auto", "on", "off"):
            raise ValueError(f"augment must be auto, on or off, got {self.augment!r}")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# --- flat key = value files -------------------------------------------------

def _coerce(name: str, hint, raw: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw.strip("\"'")
        if origin is tuple:
            return tuple(int(v) for v in raw.strip("()[]").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {name}: {hint}")


def _hints() -> dict:
    return typing.get_type_hints(ExperimentConfig)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected by name."""
    hints = _hints()
    values: dict = {}
    unknown = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            unknown.append(key)
            continue
        values[key] = _coerce(key, hints[key], raw)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return apply_overrides(base or ExperimentConfig(), values)


def apply_overrides(config: ExperimentConfig, values: dict) -> ExperimentConfig:
    hints = _hints()
    bad = [k for k in values if k not in hints]
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    coerced = {k: _coerce(k, hints[k], v) if isinstance(v, str) and hints[k] is not str else v
               for k, v in values.items()}
    try:
        return dataclasses.replace(config, **coerced)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --- assembly -----------------------------------------------------------------

def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "gaussian":
        seed = config.seed if config.data_seed < 0 else config.data_seed
        return data_mod.synth_gaussian_mixture(
            config.num_classes, config.samples_per_class, config.input_dim,
            config.class_separation, seed, config.test_fraction,
        )
    root = Path(config.data_path)
    if config.dataset == "idx":
        train = data_mod.load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte",
                                  config.num_classes, "train")
        test = data_mod.load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte",
                                 config.num_classes, "test", (train.mean, train.std))
        return train, test
    batches = sorted(root.glob("data_batch_*.bin"))
    if not batches:
        raise FileNotFoundError(f"no data_batch_*.bin files under {root}")
    pixels, labels = zip(*(data_mod.read_cifar_binary(p) for p in batches))
    raw = np.concatenate(pixels).astype(np.float64) / 255.0
    mean, std = data_mod.channel_stats(raw)
    train = Dataset(data_mod.normalize(raw, mean, std), np.concatenate(labels), 10, "train", mean, std)
    test = data_mod.load_cifar_binary(root / "test_batch.bin", "test", (mean, std))
    return train, test


def group_config(config: ExperimentConfig, input_shape: tuple[int, ...], num_classes: int) -> StudentGroupConfig:
    common = dict(m=config.m, mode=config.mode, feature_dim=config.feature_dim, seed=config.seed)
    if config.arch == "mlp":
        if len(input_shape) != 1:
            input_shape = (int(np.prod(input_shape)),)
        return mlp_config(input_shape[0], num_classes, hidden=config.hidden, **common)
    return cnn_config(input_shape, num_classes, **common)


def flatten_if_needed(ds: Dataset, config: ExperimentConfig) -> Dataset:
    if config.arch == "mlp" and ds.inputs.ndim > 2:
        return dataclasses.replace(ds, inputs=ds.inputs.reshape(len(ds), -1))
    return ds


def build_teacher(config: ExperimentConfig, input_dim: int, num_classes: int) -> Student:
    h = config.teacher_hidden
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
    teacher, _ = build_network((f"linear:{h}", "relu", f"linear:{h}", "relu"), (input_dim,), num_classes,
                               rng, "teacher")
    return teacher


def prepare_teacher(config: ExperimentConfig, train: Dataset) -> Student:
    if config.arch != "mlp":
        raise ConfigError("teacher-assisted methods are implemented for MLP students only")
    teacher = build_teacher(config, train.inputs.shape[1], train.num_classes)
    epochs = config.epochs if config.teacher_epochs < 0 else config.teacher_epochs
    tconf = config.replace(epochs=epochs, method="independent").train_config()
    return train_teacher(teacher, train, tconf, augment=False)


def run_experiment(
    config: ExperimentConfig,
    datasets: tuple[Dataset, Dataset] | None = None,
    teacher: Student | None = None,
) -> tuple[StudentGroup, ExperimentReport]:
    train, test = datasets if datasets is not None else load_datasets(config)
    train, test = flatten_if_needed(train, config), flatten_if_needed(test, config)
    group = build_group(group_config(config, train.input_shape, train.num_classes))
    if config.method in TEACHER_METHODS and teacher is None:
        teacher = prepare_teacher(config, train)
    augment = {"auto": None, "on": True, "off": False}[config.augment]
    if config.arch == "mlp":
        augment = False
    header = {"experiment_config": dataclasses.asdict(config)}
    return train_run(group, train, test, config.train_config(), teacher, augment, header)


# --- multi-method, multi-seed suites ------------------------------------------------

SuiteResults = dict  # (method, seed) -> ExperimentReport


def run_seed(config: ExperimentConfig, methods: typing.Sequence[str], seed: int,
             on_report: typing.Callable | None = None) -> SuiteResults:
    """Every method on one seed, sharing the dataset, the initial parameters and (if needed) the teacher."""
    base = config.replace(seed=seed)
    datasets = load_datasets(base)
    train = flatten_if_needed(datasets[0], base)
    teacher = None
    if any(m in TEACHER_METHODS for m in methods):
        teacher = prepare_teacher(base, train)
    results = {}
    for method in methods:
        group, report = run_experiment(base.replace(method=method), datasets, teacher)
        results[(method, seed)] = report
        if on_report is not None:
            on_report(method, seed, group, report)
    return results


def run_suite(
    config: ExperimentConfig,
    methods: typing.Sequence[str],
    seeds: typing.Sequence[int],
    workers: int = 1,
    on_report: typing.Callable | None = None,
) -> SuiteResults:
    """Run ``methods`` for each seed; seeds may run on parallel threads since they share no state."""
    results: SuiteResults = {}
    if workers <= 1 or len(seeds) <= 1:
        for s in seeds:
            results.update(run_seed(config, methods, s, on_report))
        return results
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(lambda s: run_seed(config, methods, s, on_report), seeds):
            results.update(part)
    return results


def final_means(results: SuiteResults, key: str) -> dict[str, float]:
    """Mean over seeds of a final-epoch report column, per method."""
    by_method: dict[str, list[float]] = {}
    for (method, _), report in results.items():
        by_method.setdefault(method, []).append(report.final[key])
    return {m: float(np.mean(v)) for m, v in by_method.items()}


# --- desk-scale ordinal claims ---------------------------------------------------------

DESK_METHODS = (
    "okddip", "independent", "okddip_plus_kd", "kd_only",
    "ablation:random", "ablation:self_only", "ablation:mean",
    "ablation:identity_asymmetry", "ablation:no_two_level",
)
DESK_SEEDS = (1, 2, 3)


@dataclass
class ClaimResult:
    name: str
    passed: bool
    detail: str
    violations: tuple[str, ...] = ()

    def line(self) -> str:
        extra = f"; reported violations: {', '.join(self.violations)}" if self.violations else ""
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}{extra}"


def desk_claims(results: SuiteResults) -> list[ClaimResult]:
    """Evaluate the five ordinal claims on final-epoch means over seeds."""
    err = final_means(results, "reported_error")
    ens = final_means(results, "ensemble_error")
    div = final_means(results, "diversity")
    out = []

    out.append(ClaimResult(
        "distillation helps", err["okddip"] <= err["independent"],
        f"okddip leader {err['okddip']:.2f} <= independent mean {err['independent']:.2f}"))

    ok = div["independent"] >= div["okddip"] > div["ablation:mean"]
    out.append(ClaimResult(
        "diversity ordering", ok,
        f"independent {div['independent']:.4f} >= okddip {div['okddip']:.4f} > mean {div['ablation:mean']:.4f}"))

    out.append(ClaimResult(
        "ensemble strength", ens["okddip"] <= ens["ablation:mean"],
        f"okddip peer ensemble {ens['okddip']:.2f} <= mean-ablation ensemble {ens['ablation:mean']:.2f}"))

    ablations = [m for m in err if m.startswith("ablation:")]
    violations = tuple(f"{m} {err[m]:.2f} < okddip" for m in ablations if err[m] < err["okddip"])
    out.append(ClaimResult(
        "ablation ordering", err["okddip"] < err["ablation:random"],
        f"okddip {err['okddip']:.2f} vs random {err['ablation:random']:.2f} (strictly lower required); "
        + ", ".join(f"{m.split(':')[1]} {err[m]:.2f}" for m in ablations),
        violations))

    out.append(ClaimResult(
        "teacher extension", err["okddip_plus_kd"] <= err["kd_only"],
        f"okddip+kd leader {err['okddip_plus_kd']:.2f} <= kd-only mean {err['kd_only']:.2f}"))
    return out
