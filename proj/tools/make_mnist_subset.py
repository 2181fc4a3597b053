#!/usr/bin/env python3
"""Write a fixed 2000/1000 MNIST subset in IDX format.

The 5000-digit MNIST sample shipped inside the mlxtend wheel is used as the
source so that no dataset download is needed.  The split is a seeded
shuffle and is byte-for-byte reproducible.
"""
import argparse
import glob
import gzip
import os
import random
import struct
import subprocess
import tempfile
import zipfile


def fetch_rows(wheel_dir):
    wheels = glob.glob(os.path.join(wheel_dir, "mlxtend-*.whl"))
    if not wheels:
        subprocess.check_call(["pip", "download", "--no-deps", "mlxtend==0.24.0",
                               "-d", wheel_dir])
        wheels = glob.glob(os.path.join(wheel_dir, "mlxtend-*.whl"))
    raw = zipfile.ZipFile(wheels[0]).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = []
    for line in gzip.decompress(raw).decode().splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        rows.append((vals[-1], bytes(vals[:-1])))
    return rows


def write_idx(prefix, rows):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for _, px in rows:
            f.write(px)
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for label, _ in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist_subset"))
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        rows = fetch_rows(tmp)
    random.Random(args.seed).shuffle(rows)
    os.makedirs(args.out, exist_ok=True)
    write_idx(os.path.join(args.out, "train"), rows[: args.train])
    write_idx(os.path.join(args.out, "test"), rows[args.train : args.train + args.test])


if __name__ == "__main__":
    main()
