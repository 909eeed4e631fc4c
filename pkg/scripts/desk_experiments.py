"""Every method on the desk config for several seeds, then the five ordinal claims.

    python scripts/desk_experiments.py [--config scripts/desk.cfg] [--seeds 1,2,3] [--out runs/desk]
"""
import argparse
import time
from pathlib import Path

from okddip.cli import method_tag, parse_int_list
from okddip.experiments import DESK_METHODS, desk_claims, final_means, load_config, run_suite
from okddip.metrics import emit_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).with_name("desk.cfg")))
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    config = load_config(args.config)
    out = Path(args.out)
    start = time.time()

    def save(method, seed, group, report):
        emit_csv(report, out / f"{method_tag(method)}_m{config.m}_seed{seed}.csv")
        print(f"{time.time() - start:7.1f}s seed {seed} {method:28s} "
              f"reported {report.final['reported_error']:.2f}", flush=True)

    results = run_suite(config, DESK_METHODS, parse_int_list(args.seeds), args.workers, save)
    print()
    print(f"{'method':28s} {'error':>7s} {'ensemble':>9s} {'diversity':>10s}")
    err, ens, div = (final_means(results, k) for k in ("reported_error", "ensemble_error", "diversity"))
    for m in DESK_METHODS:
        print(f"{m:28s} {err[m]:7.2f} {ens[m]:9.2f} {div[m]:10.4f}")
    print()
    for claim in desk_claims(results):
        print(claim.line())


if __name__ == "__main__":
    main()
