#!/usr/bin/env python3
"""Build a 10k-sample MNIST subset in IDX format.

Source: the `mnist` npm package (10,000 digits as JSON, pixel/255 rounded to
three decimals). Pixels are mapped back to bytes with round(v * 255).

Usage: scripts/fetch_mnist_subset.py [OUT_DIR]   (default: data/mnist-subset)
"""
import gzip
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

ROWS = COLS = 28


def main() -> None:
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(__file__), "..", "data", "mnist-subset")
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        per_digit = []
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as f:
                data = json.load(f)["data"]
            n = len(data) // (ROWS * COLS)
            per_digit.append([data[i * 784:(i + 1) * 784] for i in range(n)])

    # Interleave digits round-robin so any prefix is roughly class balanced.
    images, labels = [], []
    idx = 0
    while any(idx < len(d) for d in per_digit):
        for digit, samples in enumerate(per_digit):
            if idx < len(samples):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in samples[idx]))
                labels.append(digit)
        idx += 1

    n = len(labels)
    with gzip.GzipFile(os.path.join(out_dir, "train-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, ROWS, COLS))
        for img in images:
            f.write(img)
    with gzip.GzipFile(os.path.join(out_dir, "train-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"wrote {n} samples to {out_dir}")


if __name__ == "__main__":
    main()
