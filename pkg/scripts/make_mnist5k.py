"""Convert the 5000-digit MNIST subset shipped in the mlxtend wheel to IDX files.

usage: python scripts/make_mnist5k.py path/to/mlxtend-*.whl data/mnist5k

The subset is class-sorted (500 per digit); it is split 400/100 per class into
train and test files with a fixed shuffle.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx(path, arr):
    code = {1: 0x00000801, 3: 0x00000803}[arr.ndim]
    header = struct.pack(">I", code) + b"".join(struct.pack(">I", d) for d in arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + arr.astype(np.uint8).tobytes())


def main(wheel, out):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",").astype(np.uint8)
    images, labels = table[:, :-1].reshape(-1, 28, 28), table[:, -1]
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.append(idx[:400])
        test.append(idx[400:])
    train = rng.permutation(np.concatenate(train))
    test = rng.permutation(np.concatenate(test))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(out / "t1k-images-idx3-ubyte.gz", images[test])
    write_idx(out / "t1k-labels-idx1-ubyte.gz", labels[test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
