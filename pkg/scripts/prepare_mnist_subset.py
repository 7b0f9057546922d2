"""Write a seeded MNIST subset as IDX files.

The 5000-image MNIST sample bundled with mlxtend (500 per class) is shuffled
and split into train/test parts. Usage:

    python3 scripts/prepare_mnist_subset.py --out data/mnist-subset --train 2000 --test 1000
"""
import argparse
import gzip
import os

import numpy as np

from robustdual.io import write_idx


def bundled_csv() -> str:
    import mlxtend
    return os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist-subset")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--source", default=None, help="CSV with 784 pixel columns then a label column")
    args = ap.parse_args()

    path = args.source or bundled_csv()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",")
    pixels, labels = raw[:, :-1].astype(np.uint8), raw[:, -1].astype(np.uint8)
    if args.train + args.test > len(labels):
        raise SystemExit(f"only {len(labels)} images available")
    order = np.random.default_rng(args.seed).permutation(len(labels))
    tr, te = order[:args.train], order[args.train:args.train + args.test]
    os.makedirs(args.out, exist_ok=True)
    for name, idx in (("train", tr), ("test", te)):
        write_idx(pixels[idx].reshape(-1, 28, 28), labels[idx],
                  os.path.join(args.out, f"{name}-images-idx3-ubyte"),
                  os.path.join(args.out, f"{name}-labels-idx1-ubyte"))
        print(f"{name}: {len(idx)} images, class counts {np.bincount(labels[idx], minlength=10).tolist()}")


if __name__ == "__main__":
    main()
