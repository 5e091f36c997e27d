"""Compute (or resume) every experiment cell behind acceptance criteria 1-2.

Usage: python3 tests/run_acceptance_experiments.py [--jobs N]
"""
import argparse
import os
import sys
import time

sys.path.insert(0, os.path.dirname(__file__))
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from acceptance_config import RESULTS_CSV, acceptance_specs  # noqa: E402

from dispatchsim.harness import run_experiment  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--jobs", type=int, default=max(1, (os.cpu_count() or 1)))
    args = parser.parse_args()
    t0 = time.time()
    for spec in acceptance_specs():
        n = run_experiment(spec, RESULTS_CSV, resume=True, jobs=args.jobs)
        print(
            f"[{time.time() - t0:8.1f}s] {spec.policy:<9} drifts={spec.drifts} "
            f"lambdas={len(spec.lambdas)} -> {len(n)} rows",
            flush=True,
        )
    print(f"all cells complete in {RESULTS_CSV}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
