"""Builds the gzip IDX MNIST subset used by the integration and acceptance tests.

Input is the `src/digits` directory of the `mnist` npm package, which holds
10 000 digits as per-class JSON arrays of pixels scaled to [0, 1]. Each class
is split into its first four fifths (train) and the rest (test); both splits
are interleaved class by class so that leading slices stay balanced.

    python3 scripts/make_mnist_fixture.py path/to/mnist/src/digits crates/core/tests/data/mnist
"""

import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def interleave(per_class):
    out = []
    longest = max(len(rows) for rows in per_class)
    for i in range(longest):
        for label, rows in enumerate(per_class):
            if i < len(rows):
                out.append((rows[i], label))
    return out


def write_split(out_dir, prefix, samples):
    images = bytearray(struct.pack(">IIII", 0x803, len(samples), SIDE, SIDE))
    labels = bytearray(struct.pack(">II", 0x801, len(samples)))
    for pixels, label in samples:
        images.extend(pixels)
        labels.append(label)
    for name, payload in ((f"{prefix}-images-idx3-ubyte.gz", images), (f"{prefix}-labels-idx1-ubyte.gz", labels)):
        # mtime=0 keeps the archive byte-stable across runs
        with gzip.GzipFile(out_dir / name, "wb", compresslevel=9, mtime=0) as f:
            f.write(payload)


def main():
    digits, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        raw = json.loads((digits / f"{label}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        rows = [
            bytes(round(v * 255) for v in raw[i * SIDE * SIDE : (i + 1) * SIDE * SIDE])
            for i in range(count)
        ]
        cut = count * 4 // 5
        train.append(rows[:cut])
        test.append(rows[cut:])
    train, test = interleave(train), interleave(test)
    write_split(out_dir, "train", train)
    write_split(out_dir, "t10k", test)
    print(f"train {len(train)}, test {len(test)}")


if __name__ == "__main__":
    main()
