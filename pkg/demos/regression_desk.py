"""Meta-train SImPa and the MAML baseline on the sinusoid/linear regression
environment at desk scale, then compare them on held-out 5-shot tasks."""

import argparse
import tempfile
from pathlib import Path

from simpa.config import load_config
from simpa.experiments import run_eval, run_train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--n-tasks", type=int, default=50)
    args = ap.parse_args()

    cfg = load_config("regression-desk")
    with tempfile.TemporaryDirectory() as tmp:
        for mode in ("simpa", "maml"):
            c = cfg.with_overrides(mode=mode)
            res = run_train(c, Path(tmp) / mode, iterations=args.iterations)
            s = run_eval(c, res.checkpoint, n_tasks=args.n_tasks).summary
            print(f"{mode:6s} mse {s['mse']:.3f} (sinusoid {s.get('mse_sinusoid', float('nan')):.3f}, "
                  f"linear {s.get('mse_linear', float('nan')):.3f})  nll {s['nll']:.3f}  ece {s['ece']:.4f}")


if __name__ == "__main__":
    main()
