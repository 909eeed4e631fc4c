"""Leader error and peer-ensemble error of OKDDip as the group grows.

    python scripts/group_size_sweep.py [--m 3..8] [--seeds 1] [--out runs/sweep]
"""
import argparse
from pathlib import Path

from okddip.cli import parse_int_list
from okddip.experiments import final_means, load_config, run_suite
from okddip.metrics import emit_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).with_name("desk.cfg")))
    ap.add_argument("--m", default="3..8")
    ap.add_argument("--seeds", default="1")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    base = load_config(args.config)
    if args.epochs is not None:
        base = base.replace(epochs=args.epochs)
    print(f"{'m':>3s} {'leader':>8s} {'ensemble':>9s} {'diversity':>10s}")
    for m in parse_int_list(args.m):
        config = base.replace(m=m)
        results = run_suite(config, ["okddip"], parse_int_list(args.seeds))
        for (_, seed), report in results.items():
            emit_csv(report, Path(args.out) / f"okddip_m{m}_seed{seed}.csv")
        err, ens, div = (final_means(results, k)["okddip"]
                         for k in ("reported_error", "ensemble_error", "diversity"))
        print(f"{m:3d} {err:8.2f} {ens:9.2f} {div:10.4f}", flush=True)


if __name__ == "__main__":
    main()
