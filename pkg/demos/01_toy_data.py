"""
Toy corpus splits
=================

The toy testbed reads plain text files and cuts them into 64-byte windows.
This script shuffles the windows of ``data/corpus.txt`` once (seed 0) and
writes train/val/test files whose windows line up again when re-chunked.
Run from the repository root: ``python3 demos/01_toy_data.py``.
"""

from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
SEQ = 64
SIZES = {"train": 400, "val": 48, "test": 96}

raw = (ROOT / "data" / "corpus.txt").read_bytes()
chunks = [raw[i : i + SEQ] for i in range(0, len(raw) - SEQ + 1, SEQ)]
print(f"{len(raw)} bytes -> {len(chunks)} windows of {SEQ}")

# the corpus is pure ASCII, so any concatenation of windows stays valid UTF-8
assert max(raw) < 128

order = np.random.default_rng(0).permutation(len(chunks))
out = ROOT / "data" / "toy"
out.mkdir(exist_ok=True)
start = 0
for name, n in SIZES.items():
    picked = order[start : start + n]
    start += n
    (out / f"{name}.txt").write_bytes(b"".join(chunks[i] for i in picked))
    print(f"{name:5s} {n:4d} windows  {n * SEQ:6d} bytes")

# %%
# A quick look at what the model sees: bytes, one token each.
sample = chunks[order[0]]
print(list(sample[:16]))
print(sample.decode())
