#!/usr/bin/env python3
"""Build the bundled MNIST subset from the `mnist` npm package.

The npm package (MIT, github.com/cazala/mnist) ships 10,000 MNIST digits as
JSON arrays of intensities rounded to three decimals. This script restores the
0-255 bytes, shuffles with a fixed seed, and writes gzip-compressed IDX files
laid out like the official distribution (8000 train / 2000 test).

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/prepare_mnist_subset.py package/src/digits data/mnist-subset
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path: Path, array: np.ndarray) -> None:
    magic = {1: 0x00000801, 3: 0x00000803}[array.ndim]
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=20191)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        block = np.asarray(data, dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.clip(np.rint(block * 255.0), 0, 255).astype(np.uint8))
        labels.append(np.full(len(block), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    order = np.random.RandomState(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = len(labels) - args.test

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", labels[n_train:])
    print(f"wrote {n_train} train / {args.test} test samples to {args.out_dir}")


if __name__ == "__main__":
    main()
