"""Patch-wise inference: tile, cluster, run both paths, merge.

Per patch the backbone is::

    x0 = head(lr)                        # float, unquantized
    x  = ResBlock_0 .. ResBlock_{N-1}    # quantized per path schedule
    x  = body_end(x) + x0                # float
    hr = tail(upsampler(x))              # float

Reference patches run every block at high bits and keep a copy of the
feature entering each RefER position.  Query patches run block 0 at high
bits, the rest at (medium weights, low activations), and replace the last K
blocks by RefER blocks fed with the snapshot of their reference.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustblock import ClusterAssignment, PatchGrid, cluster, extract_features
from .config import NetworkConfig, TilingConfig
from .cost_model import CostReport, InferencePlan, cost_report, make_plan
from .errors import DimensionError, PatchError, PlanViolationError
from .parallel import ordered_map
from .quantizer import FULL_PRECISION, BitPolicy, fake_quant
from .refer import DEFAULT_TEMPERATURE, Flow, refer_block
from .tensor_core import DTYPE, conv2d, pixel_shuffle
from .weights import ModelWeights

log = logging.getLogger(__name__)


# -- tiling ------------------------------------------------------------------


def tile_positions(length: int, patch: int, stride: int) -> list[int]:
    """Patch starts along one axis; the last patch is shifted inward."""
    if length <= patch:
        return [0]
    return list(range(0, length - patch, stride)) + [length - patch]


def _core_bounds(starts: list[int], patch: int, length: int) -> list[tuple[int, int]]:
    extent = min(patch, length)
    cuts = [0] + [(a + extent + b) // 2 for a, b in zip(starts, starts[1:])] + [length]
    return list(zip(cuts[:-1], cuts[1:]))


def _as_image(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=DTYPE)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got shape {np.shape(image)}")
    return x


def tile_image(image: np.ndarray, cfg: TilingConfig) -> PatchGrid:
    """Full-size patches every ``stride`` pixels; images smaller than a patch
    along an axis give one patch of the image's own extent."""
    x = _as_image(image)
    _, h, w = x.shape
    p, s = cfg.patch_size, cfg.stride
    ys, xs = tile_positions(h, p, s), tile_positions(w, p, s)
    ph, pw = min(p, h), min(p, w)
    rows, cols = _core_bounds(ys, p, h), _core_bounds(xs, p, w)
    patches, origins, cores = [], [], []
    for y, (r0, r1) in zip(ys, rows):
        for xx, (c0, c1) in zip(xs, cols):
            patches.append(x[:, y : y + ph, xx : xx + pw])
            origins.append((y, xx))
            cores.append((r0, r1, c0, c1))
    return PatchGrid(np.stack(patches), origins, (ph, pw), cfg.overlap, (h, w), cores)


def merge_tiles(hr_patches, grid: PatchGrid, scale: int) -> np.ndarray:
    """Core-crop merge: each output pixel comes from the one patch whose core
    region contains it.  Returns 3 x sH x sW."""
    if len(hr_patches) != len(grid):
        raise DimensionError(f"{len(hr_patches)} HR patches for a grid of {len(grid)}")
    h, w = grid.image_size
    ph, pw = grid.patch_size
    out = np.empty((3, scale * h, scale * w), dtype=DTYPE)
    for patch, (oy, ox), (r0, r1, c0, c1) in zip(hr_patches, grid.origins, grid.cores):
        patch = np.asarray(patch)
        if patch.ndim == 4:
            patch = patch[0]
        if patch.shape != (3, scale * ph, scale * pw):
            raise DimensionError(f"HR patch shape {patch.shape}, expected {(3, scale * ph, scale * pw)}")
        out[:, scale * r0 : scale * r1, scale * c0 : scale * c1] = patch[
            :, scale * (r0 - oy) : scale * (r1 - oy), scale * (c0 - ox) : scale * (c1 - ox)
        ]
    return out


# -- backbone ----------------------------------------------------------------


def _plain_conv(x, weights: ModelWeights, name: str, padding: int, activation="none"):
    w, b = weights.conv(name)
    return conv2d(x, w, b, padding=padding, activation=activation)


def backbone_head(patch: np.ndarray, weights: ModelWeights) -> np.ndarray:
    return _plain_conv(patch[None], weights, "backbone.head", weights.net.head_kernel // 2)


def backbone_tail(x: np.ndarray, x0: np.ndarray, weights: ModelWeights) -> np.ndarray:
    net = weights.net
    x = _plain_conv(x, weights, "backbone.body_end", 1) + x0
    for j, r in enumerate(net.upsample_steps):
        x = pixel_shuffle(_plain_conv(x, weights, f"backbone.up.{j}", 1), r)
    return _plain_conv(x, weights, "backbone.tail", net.tail_kernel // 2)[0]


def resblock(x: np.ndarray, weights: ModelWeights, block: int, w_bits: int, a_bits: int) -> np.ndarray:
    """x + conv2(relu(conv1(x))) with inputs and weights fake-quantized."""
    y = x
    for j in (1, 2):
        name = f"backbone.blocks.{block}.conv{j}"
        bounds = weights.act_bounds.get(name) if a_bits < FULL_PRECISION else None
        w = weights.quantized_weight(name, w_bits) if w_bits < FULL_PRECISION else weights[f"{name}.weight"]
        y = conv2d(fake_quant(y, a_bits, bounds), w, weights[f"{name}.bias"], padding=1,
                   activation="relu" if j == 1 else "none")
    return (x + y).astype(DTYPE)


@dataclass
class PathOutput:
    hr: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    flows: dict[int, Flow] = field(default_factory=dict)
    fallbacks: list[int] = field(default_factory=list)


def backbone_forward(patch: np.ndarray, weights: ModelWeights, path: str, plan: InferencePlan,
                     reference: dict[int, np.ndarray] | None = None, keep_snapshots: bool = True) -> PathOutput:
    """One patch through the backbone along ``path``.

    ``reference`` maps RefER block index to the reference feature snapshot
    and is required on the query path when the plan has RefER blocks.
    """
    patch = np.asarray(patch, dtype=DTYPE)
    if path not in ("reference", "query"):
        raise ValueError(f"path must be 'reference' or 'query', got {path!r}")
    refer = set(plan.refer_blocks) if path == "query" else set()
    if refer:
        missing = sorted(k for k in refer if reference is None or k not in reference)
        if missing:
            raise PlanViolationError(f"query path needs reference snapshots for blocks {missing}")
    x0 = backbone_head(patch, weights)
    x = x0
    out = PathOutput(hr=None)
    schedule = plan.reference_schedule if path == "reference" else plan.query_schedule
    for k, (wb, ab) in enumerate(schedule):
        if path == "reference" and keep_snapshots and k in weights.net.refer_blocks:
            out.snapshots[k] = x[0].copy()
        if k in refer:
            r = refer_block(x[0], reference[k], weights.refer_head(weights.net.refer_blocks.index(k)),
                            wb, plan.policy.b_low, plan.temperature, plan.flow_mode)
            x = r.feature[None]
            if r.flow is not None:
                out.flows[k] = r.flow
            if r.fallback:
                out.fallbacks.append(k)
        else:
            x = resblock(x, weights, k, wb, ab)
    out.hr = backbone_tail(x, x0, weights)
    return out


# -- orchestration -------------------------------------------------------------


@dataclass
class RunResult:
    image: np.ndarray  # 3 x sH x sW
    report: CostReport
    assignment: ClusterAssignment | None
    plan: InferencePlan
    flows: dict[int, dict[int, Flow]] = field(default_factory=dict)  # query patch -> block -> flow

    def __iter__(self):
        # allows ``image, report = run_refqsr(...)``
        return iter((self.image, self.report))


def build_plan(net: NetworkConfig, policy: BitPolicy, assignment: ClusterAssignment | None, mode: str,
               temperature: float = DEFAULT_TEMPERATURE, flow_mode: str = "hard") -> InferencePlan:
    return make_plan(net, policy, mode, assignment, temperature, flow_mode)


def _patch_call(fn, i):
    try:
        return fn(i)
    except PatchError:
        raise
    except Exception as e:
        raise PatchError(i, e) from e


def run_refqsr(
    image: np.ndarray,
    weights: ModelWeights,
    net: NetworkConfig | None = None,
    tiling: TilingConfig | None = None,
    policy: BitPolicy | None = None,
    tau: float = 0.5,
    mode: str = "refqsr",
    temperature: float = DEFAULT_TEMPERATURE,
    flow_mode: str = "hard",
) -> RunResult:
    net = net or weights.net
    if net != weights.net:
        raise ValueError("network config does not match the loaded weights")
    tiling = tiling or TilingConfig()
    policy = policy or BitPolicy(8, 3)
    grid = tile_image(image, tiling)
    n = len(grid)

    if mode == "refqsr":
        feats = extract_features(grid, weights.clust())
        assignment = cluster(feats, tau)
        refs, queries = assignment.references, assignment.queries
    elif mode == "all_reference":
        assignment = ClusterAssignment.all_references(n)
        refs, queries = list(range(n)), []
    elif mode == "all_query_no_refer":
        assignment = None
        refs, queries = [], list(range(n))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    plan = build_plan(net, policy, assignment, mode, temperature, flow_mode)
    log.info("%s: %d patches, %d references, %d queries", mode, n, len(refs), len(queries))

    dependents = {assignment.ref_of[q] for q in queries} if assignment else set()
    ref_out = dict(zip(refs, ordered_map(
        lambda i: _patch_call(lambda j: backbone_forward(grid.patches[j], weights, "reference", plan,
                                                         keep_snapshots=j in dependents), i),
        refs,
    )))

    def run_query(i):
        snaps = ref_out[assignment.ref_of[i]].snapshots if plan.refer_blocks else None
        return backbone_forward(grid.patches[i], weights, "query", plan, reference=snaps)

    q_out = dict(zip(queries, ordered_map(lambda i: _patch_call(run_query, i), queries)))
    outputs = {**ref_out, **q_out}
    hr = merge_tiles([outputs[i].hr for i in range(n)], grid, net.scale_factor)

    p = tiling.patch_size
    report = cost_report(plan, net, grid.image_size, (len(refs), len(queries)), p, tiling.overlap)
    flows = {i: q_out[i].flows for i in queries if q_out[i].flows}
    return RunResult(hr, report, assignment, plan, flows)


def plain_forward(patch: np.ndarray, weights: ModelWeights, bits: int) -> np.ndarray:
    """The backbone with every ResBlock at ``bits`` (weights and activations)."""
    x0 = backbone_head(np.asarray(patch, dtype=DTYPE), weights)
    x = x0
    for k in range(weights.net.num_resblocks):
        x = resblock(x, weights, k, bits, bits)
    return backbone_tail(x, x0, weights)


def quantized_inference(image: np.ndarray, weights: ModelWeights, tiling: TilingConfig | None = None,
                        bits: int = 8) -> np.ndarray:
    """Uniform-precision patch-wise baseline, no clustering and no RefER."""
    tiling = tiling or TilingConfig()
    grid = tile_image(image, tiling)
    hr = ordered_map(lambda i: _patch_call(lambda j: plain_forward(grid.patches[j], weights, bits), i), range(len(grid)))
    return merge_tiles(hr, grid, weights.net.scale_factor)
