"""Texture-feature patch clustering.

Each patch goes through a small 8-bit network (three 3x3 conv/ReLU layers,
the first with stride 3, global average pooling and a fully connected layer)
giving one logit row per patch.  With ``V`` the N x C logit matrix::

    A  = row-softmax(V)          # class distribution of each patch
    A' = col-softmax(V).T        # patch distribution of each class (C x N)
    M  = A @ A'                  # N x N
    ref_of[i] = argmax_j M[i, j]

Patches hit by some argmax become references.  A query whose cosine
similarity (on the raw logits) to its reference is <= tau is promoted to an
isolated self-reference.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGeometryError
from .parallel import ordered_map
from .quantizer import fake_quant
from .tensor_core import DTYPE, conv2d, fully_connected, pool

log = logging.getLogger(__name__)

CLUST_BITS = 8


@dataclass
class PatchGrid:
    """N equally sized patches cut from one image, with their placement."""

    patches: np.ndarray  # (N, 3, H, W)
    origins: list[tuple[int, int]]  # (row, col) of each patch in the image
    patch_size: tuple[int, int]
    overlap: int
    image_size: tuple[int, int]
    cores: list[tuple[int, int, int, int]] = field(default_factory=list)  # (r0, r1, c0, c1)

    def __len__(self) -> int:
        return len(self.origins)


@dataclass(frozen=True)
class ClusterAssignment:
    reference_set: frozenset[int]
    ref_of: dict[int, int]
    isolated: frozenset[int] = frozenset()
    similarity: dict[int, float] = field(default_factory=dict)

    @property
    def n_patches(self) -> int:
        return len(self.ref_of)

    @property
    def queries(self) -> list[int]:
        return [i for i in sorted(self.ref_of) if i not in self.reference_set]

    @property
    def references(self) -> list[int]:
        return sorted(self.reference_set)

    @classmethod
    def all_references(cls, n: int) -> "ClusterAssignment":
        return cls(frozenset(range(n)), {i: i for i in range(n)}, frozenset(), {i: 1.0 for i in range(n)})

    def to_dict(self) -> dict:
        n = self.n_patches
        sims = [self.similarity.get(i) for i in range(n)]
        return {
            "n_patches": n,
            "reference_set": self.references,
            "queries": self.queries,
            "isolated": sorted(self.isolated),
            "ref_of": [self.ref_of[i] for i in range(n)],
            "similarity": [None if s is None or math.isnan(s) else float(s) for s in sims],
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2)


def _features_one(patch: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    x = patch[None]
    for name, stride in (("clust.conv1", 3), ("clust.conv2", 1), ("clust.conv3", 1)):
        x = conv2d(
            fake_quant(x, CLUST_BITS),
            fake_quant(w[f"{name}.weight"], CLUST_BITS),
            w[f"{name}.bias"],
            stride=stride,
            activation="relu",
        )
    g = pool(x, "global_average").reshape(1, -1)
    return fully_connected(fake_quant(g, CLUST_BITS), fake_quant(w["clust.fc.weight"], CLUST_BITS), w["clust.fc.bias"])[0]


def min_patch_size() -> int:
    # conv1 (k3, s3) must leave >= 5 pixels for the two valid 3x3 convs after it
    return 3 * 4 + 3


def extract_features(patches, weights: dict[str, np.ndarray]) -> np.ndarray:
    """N x C logits.  Each patch is quantized and processed independently."""
    arr = patches.patches if isinstance(patches, PatchGrid) else np.asarray(patches, dtype=DTYPE)
    if arr.ndim == 3:
        arr = arr[None]
    h, w = arr.shape[-2:]
    if min(h, w) < min_patch_size():
        raise InvalidGeometryError(
            f"patch {h}x{w} too small for ClustBlock (needs >= {min_patch_size()} per side)"
        )
    rows = ordered_map(lambda p: _features_one(p, weights), list(arr))
    return np.stack(rows).astype(DTYPE)


def _affinity(v: np.ndarray, chunk: int = 256) -> np.ndarray:
    """M = A @ A' computed entry-by-entry as an elementwise product + sum so
    that identical columns give bit-identical scores (BLAS does not promise
    that)."""
    v = np.asarray(v, dtype=np.float64)
    a = np.exp(v - v.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    ap = np.exp(v - v.max(axis=0, keepdims=True))
    ap /= ap.sum(axis=0, keepdims=True)  # N x C, column j is row j of A'
    n = len(v)
    m = np.empty((n, n))
    for s in range(0, n, chunk):
        m[s : s + chunk] = (a[s : s + chunk, None, :] * ap[None, :, :]).sum(axis=-1)
    return m


def _finalize(ref_of: list[int]) -> ClusterAssignment:
    refs = frozenset(ref_of)
    mapping = {i: (i if i in refs else r) for i, r in enumerate(ref_of)}
    return ClusterAssignment(refs, mapping)


def cluster_patches(features: np.ndarray) -> ClusterAssignment:
    v = np.asarray(features)
    if v.ndim != 2 or len(v) == 0:
        raise ValueError(f"features must be a non-empty N x C matrix, got {v.shape}")
    m = _affinity(v)
    return _finalize([int(j) for j in np.argmax(m, axis=1)])


def cluster_oracle(features: np.ndarray) -> ClusterAssignment:
    """Brute-force version of :func:`cluster_patches` with plain loops; a
    verifier for tests, not for production use."""
    v = [[float(x) for x in row] for row in np.asarray(features)]
    n, c = len(v), len(v[0])
    a = []
    for i in range(n):
        den = sum(math.exp(v[i][k]) for k in range(c))
        a.append([math.exp(v[i][k]) / den for k in range(c)])
    ap = [[0.0] * n for _ in range(c)]
    for k in range(c):
        den = sum(math.exp(v[i][k]) for i in range(n))
        for j in range(n):
            ap[k][j] = math.exp(v[j][k]) / den
    ref_of = []
    for i in range(n):
        best, best_j = -math.inf, 0
        for j in range(n):
            mij = sum(a[i][k] * ap[k][j] for k in range(c))
            if mij > best:
                best, best_j = mij, j
        ref_of.append(best_j)
    return _finalize(ref_of)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return math.nan
    return float(u @ v / (nu * nv))


def apply_similarity_threshold(assignment: ClusterAssignment, features: np.ndarray, tau: float = 0.5) -> ClusterAssignment:
    v = np.asarray(features)
    refs, isolated = set(assignment.reference_set), set(assignment.isolated)
    ref_of = dict(assignment.ref_of)
    sims: dict[int, float] = {}
    for i in sorted(ref_of):
        r = ref_of[i]
        if i == r:
            sims[i] = 1.0
            continue
        s = cosine(v[i], v[r])
        sims[i] = s
        if math.isnan(s):
            log.warning("patch %d: zero-norm feature vector, similarity undefined; isolating it", i)
        if math.isnan(s) or s <= tau:
            refs.add(i)
            isolated.add(i)
            ref_of[i] = i
    return ClusterAssignment(frozenset(refs), ref_of, frozenset(isolated), sims)


def cluster(features: np.ndarray, tau: float = 0.5) -> ClusterAssignment:
    return apply_similarity_threshold(cluster_patches(features), features, tau)
