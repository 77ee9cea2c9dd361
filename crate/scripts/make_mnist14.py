"""Build the 14x14 MNIST subset shipped in crates/core/data.

Source: the 5000-sample MNIST extract bundled with the `mlxtend` wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per class).

    pip download --no-deps -d /tmp/wheels mlxtend
    python3 scripts/make_mnist14.py /tmp/wheels/mlxtend-*.whl

Images are 2x2 average-pooled to 14x14 (rounded to nearest u8) and split per
class into 200 training and 100 test images using a fixed permutation.
Output is written in the standard IDX format.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, arr.ndim)
    header += b"".join(struct.pack(">I", d) for d in arr.shape)
    path.write_bytes(header + arr.tobytes())


def main(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    x = table[:, :-1].reshape(-1, 28, 28).astype(np.float64)
    y = table[:, -1]
    x14 = x.reshape(-1, 14, 2, 14, 2).mean(axis=(2, 4))
    x14 = np.clip(np.rint(x14), 0, 255).astype(np.uint8)

    rng = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        train.extend(idx[:200])
        test.extend(idx[200:300])
    train = rng.permutation(np.array(train))
    test = rng.permutation(np.array(test))

    out = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist14-train-images.idx3-ubyte", x14[train])
    write_idx(out / "mnist14-train-labels.idx1-ubyte", y[train])
    write_idx(out / "mnist14-test-images.idx3-ubyte", x14[test])
    write_idx(out / "mnist14-test-labels.idx1-ubyte", y[test])


if __name__ == "__main__":
    main(sys.argv[1])
