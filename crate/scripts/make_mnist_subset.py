"""Build the bundled 2000/500 MNIST subset as IDX files.

Source: the `mnist` npm package (MIT), which ships 10,000 MNIST digits as
per-class JSON arrays of 784 intensities in [0, 1], rounded to 3 decimals.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits crates/core/data/mnist-subset
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN, TEST = 2000, 500


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        for i in range(0, len(data), 784):
            pixels = [int(round(v * 255)) for v in data[i : i + 784]]
            samples.append((pixels, digit))
    random.Random(20221).shuffle(samples)
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN : TRAIN + TEST]
    write_images(dst / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [s[1] for s in test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
