#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package (MIT) into IDX files.

The package holds 10,000 MNIST digits as per-class arrays of 784 floats rounded
to three decimals. Pixels are mapped back to bytes with round(v * 255). For each
class the last 200 digits form the test split (2,000 total); the rest (8,000)
form the training split.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import os
import struct
import sys

TEST_PER_CLASS = 200
SIDE = 28


def write_idx(prefix, images, labels):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    train, test = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        n = len(flat) // (SIDE * SIDE)
        for i in range(n):
            pixels = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            img = [min(255, max(0, round(v * 255))) for v in pixels]
            (test if i >= n - TEST_PER_CLASS else train).append((img, digit))
    # interleave classes deterministically so the files are not label-sorted
    def interleave(items):
        by_class = [[x for x in items if x[1] == d] for d in range(10)]
        out = []
        while any(by_class):
            for bucket in by_class:
                if bucket:
                    out.append(bucket.pop(0))
        return out

    os.makedirs(dst, exist_ok=True)
    for name, items in (("train", interleave(train)), ("t10k", interleave(test))):
        write_idx(os.path.join(dst, name), [x[0] for x in items], [x[1] for x in items])
        print(name, len(items))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
