#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships 10,000 MNIST
digits as JSON arrays of pixel intensities divided by 255 and rounded to three
decimals. Rounding error is below 0.5/255, so the original bytes are recovered
exactly by round(v * 255).

Samples are interleaved by digit (one of each class per round) so every prefix
is class balanced. The first `--train` samples form the training file and the
next `--test` samples the test file.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import argparse
import json
import struct
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=500)
    args = ap.parse_args()

    per_digit = []
    for d in range(10):
        data = json.loads(Path(args.digits_dir, f"{d}.json").read_text())["data"]
        assert len(data) % 784 == 0
        per_digit.append([data[i : i + 784] for i in range(0, len(data), 784)])

    images, labels = [], []
    rnd = 0
    while len(images) < args.train + args.test:
        for d in range(10):
            if rnd < len(per_digit[d]):
                px = [int(round(v * 255)) for v in per_digit[d][rnd]]
                assert all(0 <= p <= 255 for p in px)
                images.append(px)
                labels.append(d)
        rnd += 1

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = args.train
    write_idx_images(out / "train-images-idx3-ubyte", images[:n])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[:n])
    m = n + args.test
    write_idx_images(out / "t10k-images-idx3-ubyte", images[n:m])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[n:m])


if __name__ == "__main__":
    main()
