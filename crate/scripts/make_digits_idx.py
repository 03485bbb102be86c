"""Write the 8x8 handwritten digits bundled with scikit-learn as IDX files.

Pixels (0..16) are rescaled to 0..255. The split is a fixed shuffle with
seed 0: 1437 training images and 360 test images.
"""
import os
import struct
import sys

import numpy as np
from sklearn.datasets import load_digits


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(out_dir):
    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0).clip(0, 255)
    labels = digits.target
    perm = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    n_train = 1437
    os.makedirs(out_dir, exist_ok=True)
    write_images(os.path.join(out_dir, "train-images-idx3-ubyte"), images[:n_train])
    write_labels(os.path.join(out_dir, "train-labels-idx1-ubyte"), labels[:n_train])
    write_images(os.path.join(out_dir, "t10k-images-idx3-ubyte"), images[n_train:])
    write_labels(os.path.join(out_dir, "t10k-labels-idx1-ubyte"), labels[n_train:])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits")
