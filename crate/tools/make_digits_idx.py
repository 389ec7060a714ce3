"""Write the UCI 8x8 handwritten digits (as shipped with scikit-learn) as IDX files.

Pixels are rescaled from 0..16 to 0..255. Samples are shuffled with a fixed
permutation (numpy RandomState(0)); the first 1437 form the training split and
the remaining 360 the test split.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

TRAIN = 1437


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    d = load_digits()
    images = np.rint(d.images * 255.0 / 16.0).clip(0, 255)
    labels = d.target
    perm = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    write_images(out / "train-images-idx3-ubyte", images[:TRAIN])
    write_labels(out / "train-labels-idx1-ubyte", labels[:TRAIN])
    write_images(out / "t10k-images-idx3-ubyte", images[TRAIN:])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[TRAIN:])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits")
