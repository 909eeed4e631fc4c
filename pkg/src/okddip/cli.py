"""Command-line entry point: ``python -m okddip <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import probes
from .data import DataFormatError
from .experiments import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    final_means,
    flatten_if_needed,
    load_config,
    load_datasets,
    run_suite,
)
from .metrics import ExperimentReport, emit_csv, ensemble_error, top1_error
from .models import load_checkpoint, save_checkpoint
from .training import ABLATIONS, METHODS, TrainingDivergedError, predict_group

log = logging.getLogger("okddip")

ABLATE_METHODS = ("okddip",) + tuple(f"ablation:{k}" for k in ABLATIONS)
DIVERSITY_METHODS = ("okddip", "ablation:mean", "independent")


class UsageError(ValueError):
    pass


def parse_int_list(text: str) -> list[int]:
    """``"1,2,3"`` or a range ``"3..8"`` (inclusive), or a mix of both."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = (int(v) for v in part.split(".."))
                if hi < lo:
                    raise UsageError(f"empty range {part!r}")
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            if isinstance(exc, UsageError):
                raise
            raise UsageError(f"cannot parse integer list {text!r}") from exc
    if not out:
        raise UsageError(f"empty integer list {text!r}")
    return out


def method_tag(method: str) -> str:
    return method.replace(":", "-")


def report_path(out: Path, method: str, m: int, seed: int) -> Path:
    return out / f"{method_tag(method)}_m{m}_seed{seed}.csv"


# --- config assembly -----------------------------------------------------------------

def effective_config(args) -> ExperimentConfig:
    """Config file first, then command-line overrides."""
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return apply_overrides(config, overrides)


def seeds_of(args, config: ExperimentConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return parse_int_list(args.seeds)
    return [config.seed]


def group_sizes(args, config: ExperimentConfig) -> list[int]:
    return parse_int_list(args.m) if getattr(args, "m", None) else [config.m]


def setup_logging(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.handlers[:] = [handler, logging.StreamHandler(sys.stderr)]
    log.setLevel(logging.INFO)


# --- commands ----------------------------------------------------------------------------

def _summary(results, label: str) -> None:
    for key in ("reported_error", "ensemble_error", "diversity"):
        means = final_means(results, key)
        for method, v in means.items():
            print(f"{label} {method:28s} mean final {key} = {v:.4f}")


def _run_and_write(config: ExperimentConfig, methods, seeds, out: Path, workers: int, checkpoints: bool):
    def on_report(method, seed, group, report: ExperimentReport):
        path = emit_csv(report, report_path(out, method, config.m, seed))
        log.info("wrote %s (final reported_error %.2f)", path, report.final["reported_error"])
        if checkpoints:
            ck = save_checkpoint(group, path.with_suffix(".npz"))
            log.info("wrote %s", ck)

    return run_suite(config, methods, seeds, workers, on_report)


def cmd_train(args) -> int:
    config = effective_config(args)
    out = Path(args.out)
    setup_logging(out)
    for m in group_sizes(args, config):
        cfg = config.replace(m=m)
        log.info("train method=%s m=%d seeds=%s epochs=%d", cfg.method, m, seeds_of(args, cfg), cfg.epochs)
        results = _run_and_write(cfg, [cfg.method], seeds_of(args, cfg), out, args.workers, checkpoints=True)
        _summary(results, f"m={m}")
    return 0


def cmd_ablate(args) -> int:
    config = effective_config(args)
    out = Path(args.out)
    setup_logging(out)
    for m in group_sizes(args, config):
        cfg = config.replace(m=m)
        results = _run_and_write(cfg, ABLATE_METHODS, seeds_of(args, cfg), out, args.workers, checkpoints=False)
        _summary(results, f"m={m}")
    return 0


def cmd_diversity(args) -> int:
    config = effective_config(args)
    out = Path(args.out)
    setup_logging(out)
    seeds = seeds_of(args, config)
    results = _run_and_write(config, DIVERSITY_METHODS, seeds, out, args.workers, checkpoints=False)
    for seed in seeds:
        cols = ["epoch"] + [method_tag(mth) for mth in DIVERSITY_METHODS]
        rep = ExperimentReport({"seed": seed, "source": "per-epoch 'diversity' column of each method report"}, cols)
        for e in range(config.epochs):
            row = {"epoch": e}
            row.update({method_tag(mth): results[(mth, seed)].rows[e]["diversity"] for mth in DIVERSITY_METHODS})
            rep.add_row(row)
        path = emit_csv(rep, out / f"diversity_m{config.m}_seed{seed}.csv")
        log.info("wrote %s", path)
    _summary(results, f"m={config.m}")
    return 0


def cmd_evaluate(args) -> int:
    config = effective_config(args)
    group = load_checkpoint(args.checkpoint)
    _, test = load_datasets(config)
    test = flatten_if_needed(test, config)
    probs = predict_group(group, test)
    errors = [top1_error(p, test.labels) for p in probs]
    print(f"leader_error = {errors[-1]:.2f}")
    print(f"ensemble_error = {ensemble_error(probs[:-1], test.labels):.2f}")
    for a, e in enumerate(errors):
        print(f"err_{a} = {e:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for detach in (True, False):
        gap = probes.full_loss_discrepancy(detach)
        ok &= gap < probes.GRAD_TOL
        print(f"full loss, detach_targets={detach}: max relative discrepancy {gap:.3e}")
    gaps = probes.mse_gaps()
    for T, g in gaps.items():
        print(f"KL vs MSE gradient gap at T={T:g}: {g:.4f}")
    vals = list(gaps.values())
    ok &= gaps[20.0] < probes.MSE_GAP_TOL and all(b < a for a, b in zip(vals, vals[1:]))
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    results = probes.run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} property probes passed")
    return 1 if failed else 0


# --- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="okddip", description="Online distillation with diverse peers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p, method=True, m_range=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--seeds", help="comma list or a..b range of seeds")
        if method:
            p.add_argument("--method", choices=METHODS)
        p.add_argument("--m", help="group size, or a range such as 3..8" if m_range else "group size")
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config override")
        p.add_argument("--out", default="runs", help="output directory (created if missing)")
        p.add_argument("--workers", type=int, default=1, help="threads for running seeds in parallel")

    run_flags(sub.add_parser("train", help="train one method, write reports and checkpoints"))
    run_flags(sub.add_parser("ablate", help="full method plus every ablation on the same seeds"), method=False)
    run_flags(sub.add_parser("diversity-report", help="per-epoch peer diversity for three methods"),
              method=False, m_range=False)
    ev = sub.add_parser("evaluate", help="errors of a saved group on the config's test split")
    ev.add_argument("checkpoint")
    ev.add_argument("--config")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--set", action="append", metavar="KEY=VALUE")
    sub.add_parser("gradcheck", help="finite-difference and KL-vs-MSE probes")
    sub.add_parser("selftest", help="the full property suite")
    return parser


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "diversity-report": cmd_diversity,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "diversity-report" and args.m:
        args.set = (args.set or []) + [f"m={int(args.m)}"]
        args.m = None
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, DataFormatError, TrainingDivergedError,
            FileNotFoundError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
