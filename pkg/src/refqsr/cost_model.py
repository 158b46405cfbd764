"""Analytic BitOPs / FQR / parameter accounting.

Conventions:

* ops = 2 * MACs; a layer's BitOPs = ops * w_bits * a_bits / (32 * 32), so a
  32-bit layer costs exactly its op count.
* ``bitops_g`` covers the feature-extraction stage only: the residual blocks
  on both paths and every RefER sub-operation.  The unquantized head, global
  skip conv, upsampler and tail are reported apart in
  ``unquantized_bitops_g``; ClustBlock in ``clustering_bitops_g``.
* Elementwise adds (residual skips, the RefER difference) are not charged,
  matching the pure-conv count of the backbone.
* FQR is the mean activation bit-width over (patch, block) pairs whose block
  is quantized (< 32 bits); with no quantized block it is 32.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .clustblock import CLUST_BITS
from .config import NetworkConfig
from .quantizer import FULL_PRECISION, BitPolicy
from .weights import CLUST_WIDTHS, backbone_shapes, clust_shapes, refer_layer_dims, refer_shapes

BIT_NORM = FULL_PRECISION * FULL_PRECISION
GIGA = 10**9


@dataclass(frozen=True)
class InferencePlan:
    """Resolved schedule: which bits each block runs at on each path.

    Schedules hold (weight_bits, activation_bits) per residual-block index.  On
    the query path, blocks listed in ``refer_blocks`` are RefER blocks and their
    entry is the refinement head's bit-width.
    """

    mode: str
    policy: BitPolicy
    num_blocks: int
    refer_blocks: tuple[int, ...]
    reference_schedule: tuple[tuple[int, int], ...]
    query_schedule: tuple[tuple[int, int], ...]
    assignment: object | None = None  # ClusterAssignment when built for a run
    temperature: float = 1000.0
    flow_mode: str = "hard"

    @property
    def uses_reference_path(self) -> bool:
        return self.mode in ("refqsr", "all_reference")

    @property
    def uses_query_path(self) -> bool:
        return self.mode in ("refqsr", "all_query_no_refer")

    @property
    def clustering(self) -> bool:
        return self.mode == "refqsr"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "policy": self.policy.to_dict(),
            "refer_blocks": list(self.refer_blocks),
            "reference_schedule": [list(s) for s in self.reference_schedule],
            "query_schedule": [list(s) for s in self.query_schedule],
        }


def make_plan(net: NetworkConfig, policy: BitPolicy, mode: str = "refqsr", assignment=None,
              temperature: float = 1000.0, flow_mode: str = "hard") -> InferencePlan:
    n = net.num_resblocks
    refer = net.refer_blocks if mode == "refqsr" else ()
    ref_sched = tuple((policy.high_bits(k), policy.high_bits(k)) for k in range(n))
    query_sched = []
    for k in range(n):
        hi = policy.high_bits(k)
        if (k == 0 and policy.first_block_high) or k in refer:
            query_sched.append((hi, hi))
        else:
            query_sched.append((policy.medium_bits(k), policy.b_low))
    return InferencePlan(mode, policy, n, tuple(refer), ref_sched, tuple(query_sched),
                         assignment, temperature, flow_mode)


@dataclass(frozen=True)
class LayerCost:
    name: str
    path: str  # "reference", "query", "unquantized" or "clustering"
    patches: int
    ops_per_patch: int
    w_bits: int
    a_bits: int

    @property
    def bitop_units(self) -> int:
        """ops * w_bits * a_bits summed over patches (exact integer)."""
        return self.patches * self.ops_per_patch * self.w_bits * self.a_bits

    @property
    def bitops_g(self) -> float:
        return self.bitop_units / BIT_NORM / GIGA

    def to_dict(self) -> dict:
        return {**asdict(self), "bitops_g": self.bitops_g}


@dataclass
class CostReport:
    bitops_g: float
    fqr: float
    params_m: float
    params_bitweighted_m: float = 0.0
    unquantized_bitops_g: float = 0.0
    clustering_bitops_g: float = 0.0
    per_layer: list[LayerCost] = field(default_factory=list)

    @property
    def bitops_exact(self) -> Fraction:
        """Feature-stage BitOPs in giga units as an exact rational."""
        units = sum(l.bitop_units for l in self.per_layer if l.path in ("reference", "query"))
        return Fraction(units, BIT_NORM * GIGA)

    def to_dict(self) -> dict:
        return {
            "bitops_g": self.bitops_g,
            "fqr": self.fqr,
            "params_m": self.params_m,
            "params_bitweighted_m": self.params_bitweighted_m,
            "unquantized_bitops_g": self.unquantized_bitops_g,
            "clustering_bitops_g": self.clustering_bitops_g,
            "per_layer": [l.to_dict() for l in self.per_layer],
        }


# -- op counts ---------------------------------------------------------------


def conv_ops(h_out: int, w_out: int, c_in: int, c_out: int, k: int) -> int:
    return 2 * h_out * w_out * k * k * c_in * c_out


def refer_ops(net: NetworkConfig, h: int, w: int) -> dict[str, int]:
    c = net.channels
    hw_pooled = -(-h // 3) * -(-w // 3)
    ops = {
        "pool": 2 * c * h * w,  # both features, one add per element
        "cost_volume": 2 * hw_pooled * hw_pooled * c,
        "flow_argmax": hw_pooled * hw_pooled,
        "warp": 2 * 4 * c * h * w,  # 4 bilinear taps per element
    }
    for l, (co, ci, k) in enumerate(refer_layer_dims(net)):
        ops[f"head.{l}"] = conv_ops(h, w, ci, co, k)
    return ops


def unquantized_ops(net: NetworkConfig, h: int, w: int) -> dict[str, int]:
    c = net.channels
    ops = {
        "head": conv_ops(h, w, 3, c, net.head_kernel),
        "body_end": conv_ops(h, w, c, c, 3),
    }
    hh, ww = h, w
    for j, r in enumerate(net.upsample_steps):
        ops[f"up.{j}"] = conv_ops(hh, ww, c, c * r * r, 3)
        hh, ww = hh * r, ww * r
    ops["tail"] = conv_ops(hh, ww, c, 3, net.tail_kernel)
    return ops


def clustblock_ops(h: int, w: int, classes: int) -> dict[str, int]:
    w1, w2, w3 = CLUST_WIDTHS
    h1, wd1 = (h - 3) // 3 + 1, (w - 3) // 3 + 1
    return {
        "conv1": conv_ops(h1, wd1, 3, w1, 3),
        "conv2": conv_ops(h1 - 2, wd1 - 2, w1, w2, 3),
        "conv3": conv_ops(h1 - 4, wd1 - 4, w2, w3, 3),
        "fc": 2 * w3 * classes,
    }


def patch_geometry(image_dims: tuple[int, int], patch_size: int | None, overlap: int = 6):
    """(patch_h, patch_w, n_tiles) for image-wise (None) or patch-wise accounting."""
    h, w = image_dims
    if patch_size is None:
        return h, w, 1
    from .pipeline import tile_positions

    ys, xs = tile_positions(h, patch_size, patch_size - 2 * overlap), tile_positions(w, patch_size, patch_size - 2 * overlap)
    return min(h, patch_size), min(w, patch_size), len(ys) * len(xs)


def layer_costs(plan: InferencePlan, net: NetworkConfig, patch_hw: tuple[int, int],
                patch_stats: tuple[int, int]) -> list[LayerCost]:
    h, w = patch_hw
    n_ref, n_query = patch_stats
    block_conv = conv_ops(h, w, net.channels, net.channels, 3)
    out: list[LayerCost] = []
    if n_ref:
        for k, (wb, ab) in enumerate(plan.reference_schedule):
            for j in (1, 2):
                out.append(LayerCost(f"blocks.{k}.conv{j}", "reference", n_ref, block_conv, wb, ab))
    if n_query:
        r_ops = refer_ops(net, h, w)
        for k, (wb, ab) in enumerate(plan.query_schedule):
            if k not in plan.refer_blocks:
                for j in (1, 2):
                    out.append(LayerCost(f"blocks.{k}.conv{j}", "query", n_query, block_conv, wb, ab))
                continue
            hb, low = wb, plan.policy.b_low
            bits = {
                "pool": (FULL_PRECISION, FULL_PRECISION),
                "cost_volume": (low, low),
                "flow_argmax": (FULL_PRECISION, FULL_PRECISION),
                "warp": (FULL_PRECISION, plan.reference_schedule[k][1]),
            }
            for name, ops in r_ops.items():
                wb_, ab_ = bits.get(name, (hb, hb))
                out.append(LayerCost(f"refer.{k}.{name}", "query", n_query, ops, wb_, ab_))
    return out


def _extra_costs(plan, net, patch_hw, n_total) -> list[LayerCost]:
    h, w = patch_hw
    out = [LayerCost(name, "unquantized", n_total, ops, FULL_PRECISION, FULL_PRECISION)
           for name, ops in unquantized_ops(net, h, w).items()]
    if plan.clustering:
        out += [LayerCost(f"clust.{name}", "clustering", n_total, ops, CLUST_BITS, CLUST_BITS)
                for name, ops in clustblock_ops(h, w, net.clust_classes).items()]
    return out


def _check_stats(plan: InferencePlan, patch_stats: tuple[int, int], n_tiles: int) -> None:
    n_ref, n_query = patch_stats
    if n_ref < 0 or n_query < 0 or n_ref + n_query != n_tiles:
        raise ValueError(f"patch_stats {patch_stats} inconsistent with {n_tiles} tiles")
    if n_ref and not plan.uses_reference_path:
        raise ValueError(f"mode {plan.mode} has no reference path")
    if n_query and not plan.uses_query_path:
        raise ValueError(f"mode {plan.mode} has no query path")


def count_bitops(plan: InferencePlan, net: NetworkConfig, image_dims: tuple[int, int],
                 patch_stats: tuple[int, int], patch_size: int | None = None, overlap: int = 6) -> float:
    """Feature-stage BitOPs (G).  ``image_dims`` is the LR (H, W)."""
    ph, pw, n_tiles = patch_geometry(image_dims, patch_size, overlap)
    _check_stats(plan, patch_stats, n_tiles)
    return sum(l.bitops_g for l in layer_costs(plan, net, (ph, pw), patch_stats))


def compute_fqr(plan: InferencePlan, patch_stats: tuple[int, int]) -> float:
    n_ref, n_query = patch_stats
    entries = [(n_ref, a) for _, a in plan.reference_schedule] + [(n_query, a) for _, a in plan.query_schedule]
    total = sum(n for n, a in entries if a < FULL_PRECISION)
    if total == 0:
        return float(FULL_PRECISION)
    return sum(n * a for n, a in entries if a < FULL_PRECISION) / total


def _n_params(shapes: dict[str, tuple[int, ...]]) -> int:
    total = 0
    for shape in shapes.values():
        size = 1
        for d in shape:
            size *= d
        total += size
    return total


def param_breakdown(net: NetworkConfig, plan: InferencePlan | None = None) -> dict[str, int]:
    blocks = {k: v for k, v in backbone_shapes(net).items() if k.startswith("backbone.blocks.")}
    out = {
        "backbone": _n_params(backbone_shapes(net)),
        "resblocks": _n_params(blocks),
        "refer": 0,
        "clustblock": 0,
    }
    if plan is None or plan.refer_blocks:
        out["refer"] = _n_params(refer_shapes(net))
    if plan is None or plan.clustering:
        out["clustblock"] = _n_params(clust_shapes(net.clust_classes))
    return out


def count_params(net: NetworkConfig, plan: InferencePlan | None = None) -> float:
    """Millions of parameters: shared backbone once, plus RefER heads and
    ClustBlock when the plan uses them."""
    b = param_breakdown(net, plan)
    return (b["backbone"] + b["refer"] + b["clustblock"]) / 1e6


def bitweighted_params(net: NetworkConfig, plan: InferencePlan) -> float:
    """Millions of 32-bit-equivalent parameters of the quantized blocks: each
    ResBlock at the widest weight precision it is executed with, each RefER
    head at its own precision."""
    per_block = 2 * (9 * net.channels * net.channels + net.channels)
    per_head = _n_params(refer_shapes(net)) // max(1, net.num_refer_blocks)
    total = Fraction(0)
    for k in range(plan.num_blocks):
        widths = []
        if plan.uses_reference_path:
            widths.append(plan.reference_schedule[k][0])
        if plan.uses_query_path and k not in plan.refer_blocks:
            widths.append(plan.query_schedule[k][0])
        total += Fraction(per_block * max(widths), FULL_PRECISION)
        if k in plan.refer_blocks:
            total += Fraction(per_head * plan.query_schedule[k][0], FULL_PRECISION)
    return float(total) / 1e6


def cost_report(plan: InferencePlan, net: NetworkConfig, image_dims: tuple[int, int],
                patch_stats: tuple[int, int], patch_size: int | None = None, overlap: int = 6) -> CostReport:
    ph, pw, n_tiles = patch_geometry(image_dims, patch_size, overlap)
    _check_stats(plan, patch_stats, n_tiles)
    feature = layer_costs(plan, net, (ph, pw), patch_stats)
    extra = _extra_costs(plan, net, (ph, pw), n_tiles)
    return CostReport(
        bitops_g=sum(l.bitops_g for l in feature),
        fqr=compute_fqr(plan, patch_stats),
        params_m=count_params(net, plan),
        params_bitweighted_m=bitweighted_params(net, plan),
        unquantized_bitops_g=sum(l.bitops_g for l in extra if l.path == "unquantized"),
        clustering_bitops_g=sum(l.bitops_g for l in extra if l.path == "clustering"),
        per_layer=feature + extra,
    )
