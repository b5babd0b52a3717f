#!/usr/bin/env python3
"""Fetch a 10k-digit MNIST corpus and write it as standard IDX files.

The npm package `mnist` ships 10,000 genuine MNIST digits as JSON (floats in
[0, 1], 28x28 row-major). This script pulls it with `npm pack`, converts the
pixels back to uint8, makes a deterministic per-class 80/20 train/test
partition, and writes gzipped IDX files using the canonical MNIST file names:

    train-images-idx3-ubyte.gz  train-labels-idx1-ubyte.gz
    t10k-images-idx3-ubyte.gz   t10k-labels-idx1-ubyte.gz

Usage: python tools/fetch_mnist.py [--out data/mnist] [--tarball PATH]
"""

import argparse
import json
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from osrsim.data import write_idx  # noqa: E402

TRAIN_FRACTION = 0.8
SHUFFLE_SEED = 0


def pull_tarball(workdir):
    subprocess.run(
        ["npm", "pack", "mnist@1.1.0"],
        cwd=workdir, check=True, capture_output=True, text=True,
    )
    tarballs = list(Path(workdir).glob("mnist-*.tgz"))
    if not tarballs:
        raise RuntimeError("npm pack produced no tarball")
    return tarballs[0]


def read_digits(tarball):
    """digit -> (count, 28, 28) uint8 array, in package order."""
    digits = {}
    with tarfile.open(tarball, "r:gz") as tar:
        for d in range(10):
            member = tar.extractfile(f"package/src/digits/{d}.json")
            obj = json.load(member)
            flat = np.asarray(obj["data"], dtype=np.float64)
            imgs = flat.reshape(-1, 28, 28)
            digits[d] = np.rint(imgs * 255.0).astype(np.uint8)
    return digits


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/mnist", help="output directory")
    parser.add_argument("--tarball", default=None,
                        help="use an existing mnist npm tarball instead of npm pack")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = Path(args.tarball) if args.tarball else pull_tarball(tmp)
        digits = read_digits(tarball)

    train_x, train_y, test_x, test_y = [], [], [], []
    for d in range(10):
        imgs = digits[d]
        n_train = int(len(imgs) * TRAIN_FRACTION)
        train_x.append(imgs[:n_train])
        train_y.append(np.full(n_train, d, dtype=np.uint8))
        test_x.append(imgs[n_train:])
        test_y.append(np.full(len(imgs) - n_train, d, dtype=np.uint8))

    rng = np.random.default_rng(SHUFFLE_SEED)
    out = Path(args.out)
    for role, xs, ys, img_name, lab_name in (
        ("train", train_x, train_y, "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
        ("test", test_x, test_y, "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
    ):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(x))
        write_idx(out / img_name, x[order])
        write_idx(out / lab_name, y[order])
        print(f"{role}: {len(x)} images -> {out / img_name}")


if __name__ == "__main__":
    main()
