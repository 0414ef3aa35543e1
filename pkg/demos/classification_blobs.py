"""5-way 1-shot classification on Gaussian blobs: train briefly, then show
the predictive class probabilities for one held-out episode."""

import argparse
import tempfile

import numpy as np

from simpa.config import eval_stream, load_config
from simpa.experiments import run_eval, run_train
from simpa.meta import predict


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=100)
    args = ap.parse_args()

    cfg = load_config("classification-desk")
    with tempfile.TemporaryDirectory() as tmp:
        res = run_train(cfg, tmp, iterations=args.iterations)
        summary = run_eval(cfg, res.checkpoint, n_tasks=50).summary
    print(f"accuracy {summary['accuracy']:.3f}  nll {summary['nll']:.3f}  ece {summary['ece']:.4f}")

    stream = eval_stream(cfg, 0)
    task = cfg.task_sampler()(stream)
    probs = predict(cfg.build_architecture(), cfg.train, res.state, task, task.query_x, stream.child(purpose="demo")).probs
    np.set_printoptions(precision=3, suppress=True)
    print("first five query points (true class, probabilities):")
    for y, p in zip(task.query_y[:5], probs[:5]):
        print(int(y), p)


if __name__ == "__main__":
    main()
