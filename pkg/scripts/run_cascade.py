"""Cascade vs single-model errors over several seeds.

    python3 scripts/run_cascade.py --task two-cluster --eps 0.2
    python3 scripts/run_cascade.py --task mnist --eps 0.1 --arch mlp:784-100-10
"""
import argparse

from robustdual.experiments import CascadeConfig, cascade_experiment


def main():
    d = CascadeConfig()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=("two-cluster", "mnist"), default="two-cluster")
    ap.add_argument("--eps", type=float, default=d.eps)
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--warmup", type=int, default=d.warmup)
    ap.add_argument("--lr", type=float, default=d.lr)
    ap.add_argument("--arch", default=d.arch)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(d.seeds))
    a = ap.parse_args()
    cfg = CascadeConfig(a.eps, a.epochs, a.warmup, a.lr, tuple(a.seeds), a.arch)
    res = cascade_experiment(a.task, cfg)
    for s, r in zip(cfg.seeds, res["runs"]):
        print(f"seed={s} " + " ".join(f"{k}={v:.4f}" for k, v in r.items()))
    print("median " + " ".join(f"{k}={v:.4f}" for k, v in res["median"].items()))


if __name__ == "__main__":
    main()
