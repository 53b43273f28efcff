"""Convert the MNIST / Fashion-MNIST copies shipped in npm packages to IDX files.

The ``mnist`` npm package (10,000 digits, pixels stored as v/255 rounded to
three decimals) and the ``fashion-mnist`` package (70,000 images, raw bytes)
are the only copies reachable through a package mirror.  Pixel bytes are
recovered exactly: 1/255 is more than twice the rounding step.

    npm pack mnist fashion-mnist
    tar xzf mnist-1.1.0.tgz -C /tmp/mnist
    python scripts/npm_to_idx.py mnist /tmp/mnist/package data/mnist
    python scripts/npm_to_idx.py fmnist /tmp/fmnist/package data/fmnist
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from leakybnn.dataset import ImageSet, LabelSet, idx_image_bytes, idx_label_bytes, write_idx


def read_mnist(pkg: Path):
    images, labels = [], []
    for k in range(10):
        flat = np.array(json.loads((pkg / "src" / "digits" / f"{k}.json").read_text())["data"])
        raw = np.rint(flat * 255.0)
        # every stored value must sit within the 3-decimal rounding of a byte
        assert np.abs(raw / 255.0 - flat).max() <= 5e-4 + 1e-12
        images.append(raw.reshape(-1, 28, 28))
        labels.append(np.full(len(raw) // 784, k))
    return np.concatenate(images), np.concatenate(labels)


def read_fmnist(pkg: Path):
    images, labels = [], []
    for k in range(10):
        rows = json.loads((pkg / "src" / "clothes" / f"{k}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 784]  # the package carries a few empty rows
        images.append(np.array(rows, dtype=np.float64).reshape(-1, 28, 28))
        labels.append(np.full(len(rows), k))
    return np.concatenate(images), np.concatenate(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset", choices=["mnist", "fmnist"])
    ap.add_argument("package_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    reader = read_mnist if args.dataset == "mnist" else read_fmnist
    raw, labels = reader(args.package_dir)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "images-idx3-ubyte.gz", idx_image_bytes(ImageSet(raw / 255.0)))
    write_idx(args.out_dir / "labels-idx1-ubyte.gz", idx_label_bytes(LabelSet(labels.astype(np.int64))))
    print(f"{args.dataset}: wrote {len(labels)} examples to {args.out_dir}")


if __name__ == "__main__":
    main()
