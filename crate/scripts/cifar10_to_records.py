#!/usr/bin/env python3
"""Convert the CIFAR-10 python batches into the record format.

Usage: cifar10_to_records.py CIFAR_DIR OUT_DIR [--train-limit N] [--val-limit N]

CIFAR_DIR is the extracted `cifar-10-batches-py`. Writes train.bin, val.bin
(from test_batch) and manifest.toml. A record is one label byte followed by
3*32*32 channel-major pixel bytes, which is CIFAR's own row layout.
"""

import argparse
import os
import pickle

import numpy as np


def load(path):
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    return np.asarray(d[b"data"], dtype=np.uint8), np.asarray(d[b"labels"], dtype=np.uint8)


def write(path, data, labels):
    records = np.concatenate([labels[:, None], data], axis=1)
    records.tofile(path)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("cifar_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-limit", type=int)
    ap.add_argument("--val-limit", type=int)
    args = ap.parse_args()

    parts = [load(os.path.join(args.cifar_dir, f"data_batch_{i}")) for i in range(1, 6)]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    val_x, val_y = load(os.path.join(args.cifar_dir, "test_batch"))
    if args.train_limit:
        train_x, train_y = train_x[: args.train_limit], train_y[: args.train_limit]
    if args.val_limit:
        val_x, val_y = val_x[: args.val_limit], val_y[: args.val_limit]

    os.makedirs(args.out_dir, exist_ok=True)
    write(os.path.join(args.out_dir, "train.bin"), train_x, train_y)
    write(os.path.join(args.out_dir, "val.bin"), val_x, val_y)

    pixels = train_x.reshape(len(train_x), 3, -1).astype(np.float64) / 255.0
    mean = pixels.mean(axis=(0, 2))
    std = pixels.std(axis=(0, 2))
    fmt = lambda v: "[" + ", ".join(f"{x:.6f}" for x in v) + "]"  # noqa: E731
    manifest = f"""name = "cifar10"
num_classes = 10
source_resolution = 32
channels = 3
mean = {fmt(mean)}
std = {fmt(std)}

[splits.train]
file = "train.bin"
count = {len(train_y)}

[splits.val]
file = "val.bin"
count = {len(val_y)}
"""
    with open(os.path.join(args.out_dir, "manifest.toml"), "w") as f:
        f.write(manifest)
    print(f"wrote {len(train_y)} train and {len(val_y)} val records to {args.out_dir}")


if __name__ == "__main__":
    main()
