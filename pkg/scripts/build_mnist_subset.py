"""Rebuild data/mnist10k/ from the 10k MNIST digits bundled in the npm ``mnist`` package.

The sandbox this project was developed in has no route to the usual MNIST
mirrors, but the npm registry is reachable. The npm package stores each
digit as 784 floats rounded to three decimals (v / 255), so ``round(v*255)``
recovers the original bytes exactly.

Usage::

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

N_TEST = 2000


def write_idx(path, array, magic):
    with gzip.open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for dim in array.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(array.astype(np.uint8).tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        pix = np.rint(flat.reshape(-1, 28, 28) * 255.0)
        images.append(pix)
        labels.append(np.full(len(pix), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(20220101).permutation(len(labels))
    images, labels = images[order], labels[order]
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    write_idx(dst / "train-images-idx3-ubyte.gz", images[N_TEST:], 0x00000803)
    write_idx(dst / "train-labels-idx1-ubyte.gz", labels[N_TEST:], 0x00000801)
    write_idx(dst / "t10k-images-idx3-ubyte.gz", images[:N_TEST], 0x00000803)
    write_idx(dst / "t10k-labels-idx1-ubyte.gz", labels[:N_TEST], 0x00000801)
    print(f"wrote {len(labels) - N_TEST} train / {N_TEST} test samples to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
