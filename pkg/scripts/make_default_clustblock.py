"""Regenerate the bundled frozen ClustBlock checkpoint (47 classes).

    python scripts/make_default_clustblock.py
"""
from pathlib import Path

import numpy as np

from refqsr.weights import clust_shapes, random_tensors, write_checkpoint

SEED = 47
OUT = Path(__file__).resolve().parents[1] / "src" / "refqsr" / "data" / "clustblock_default.json"


def main():
    tensors = random_tensors(clust_shapes(47), np.random.default_rng(SEED))
    write_checkpoint(OUT, tensors, arch={"clust_classes": 47, "seed": SEED})
    print(f"wrote {OUT} ({sum(t.size for t in tensors.values())} parameters)")


if __name__ == "__main__":
    main()
