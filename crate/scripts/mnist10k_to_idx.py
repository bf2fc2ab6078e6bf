"""Convert the 10,000 MNIST digits bundled in the npm `mnist` package (v1.1.0)
into IDX files: 8,000 training and 2,000 test items.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist10k_to_idx.py package/src/digits data/mnist10k
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np

src, dst = Path(sys.argv[1]), Path(sys.argv[2])
dst.mkdir(parents=True, exist_ok=True)

images, labels = [], []
for digit in range(10):
    flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
    block = np.rint(flat.reshape(-1, 784) * 255.0).clip(0, 255).astype(np.uint8)
    images.append(block)
    labels.append(np.full(len(block), digit, dtype=np.uint8))
images = np.concatenate(images)
labels = np.concatenate(labels)

order = np.random.default_rng(20240917).permutation(len(labels))
images, labels = images[order], labels[order]


def write(prefix, imgs, labs):
    with open(dst / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(imgs), 28, 28))
        f.write(imgs.tobytes())
    with open(dst / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labs)))
        f.write(labs.tobytes())


write("train", images[:8000], labels[:8000])
write("test", images[8000:], labels[8000:])
