#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

The npm package stores 10,000 MNIST training digits grouped by class, with
pixel values already divided by 255 and rounded to three decimals. This script
restores the u8 grey levels, shuffles the examples with a fixed seed and writes
`train-images-idx3-ubyte` / `train-labels-idx1-ubyte` into the output directory.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/npm_mnist_to_idx.py package/src/digits "$MFC_DATA_DIR/mnist"
"""
import json
import random
import struct
import sys
from pathlib import Path


def main() -> None:
    if len(sys.argv) != 3:
        sys.exit("usage: npm_mnist_to_idx.py DIGITS_DIR OUT_DIR")
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    examples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            pixels = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
            examples.append((pixels, digit))
    random.Random(0).shuffle(examples)
    n = len(examples)
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in examples:
            f.write(pixels)
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in examples))
    print(f"wrote {n} examples to {out}")


if __name__ == "__main__":
    main()
