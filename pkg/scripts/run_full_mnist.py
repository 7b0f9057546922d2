"""Small conv net on full MNIST with projected training.

Expects a directory of the four standard MNIST IDX files. Takes hours on CPU.

    python3 scripts/run_full_mnist.py /path/to/mnist --epochs 60 --projection 50
"""
import argparse

from robustdual.experiments import full_mnist_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--projection", type=int, default=50)
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--metrics", default=None)
    a = ap.parse_args()
    err = full_mnist_run(a.path, a.epochs, a.projection, a.eps, a.seed, a.metrics)
    print(f"robust_error={err:.4f}")


if __name__ == "__main__":
    main()
