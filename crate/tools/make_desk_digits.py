#!/usr/bin/env python3
"""Build the bundled desk-digits dataset (IDX format, gzipped).

Source: scikit-learn's load_digits() -- the UCI ML hand-written digits
test set (1797 samples of 8x8 grayscale, intensity 0..16). We rescale
intensities to 0..255 bytes, shuffle with a fixed seed, and split into
1500 train / 297 test samples. Output files use the classic IDX layout
(big-endian magic + dims, then raw bytes) so they exercise the same
loader path as full-size MNIST.
"""
import gzip
import struct
import numpy as np
from sklearn.datasets import load_digits

OUT = "data/desk-digits"
SEED = 20240913


def write_idx_images(path, images):
    n, h, w = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    d = load_digits()
    images = np.round(d.images * 255.0 / 16.0).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    rng = np.random.RandomState(SEED)
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    train_n = 1500
    write_idx_images(f"{OUT}/train-images-idx3-ubyte.gz", images[:train_n])
    write_idx_labels(f"{OUT}/train-labels-idx1-ubyte.gz", labels[:train_n])
    write_idx_images(f"{OUT}/test-images-idx3-ubyte.gz", images[train_n:])
    write_idx_labels(f"{OUT}/test-labels-idx1-ubyte.gz", labels[train_n:])
    print("train", train_n, "test", len(labels) - train_n)
    print("class counts (test):", np.bincount(labels[train_n:]))


if __name__ == "__main__":
    main()
