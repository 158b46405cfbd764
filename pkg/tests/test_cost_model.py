from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from refqsr.config import NetworkConfig
from refqsr.cost_model import (
    LayerCost,
    compute_fqr,
    conv_ops,
    cost_report,
    count_bitops,
    count_params,
    make_plan,
    param_breakdown,
    patch_geometry,
)
from refqsr.quantizer import BitPolicy

SRRESNET = NetworkConfig()
HD_LR = (180, 320)  # 1280x720 output at x4


def uniform(bits, mode="all_reference", net=SRRESNET):
    return make_plan(net, BitPolicy(bits, bits, first_block_high=False), mode)


def n_tiles(dims, patch):
    return patch_geometry(dims, patch)[2]


def exact(plan, net, dims, stats, patch=None):
    return cost_report(plan, net, dims, stats, patch).bitops_exact


# -- BitOPs -------------------------------------------------------------------


def test_single_conv_closed_form():
    ops = conv_ops(48, 48, 64, 64, 3)
    assert ops == 2 * 48 * 48 * 9 * 64 * 64
    layer = LayerCost("c", "reference", 1, ops, 8, 8)
    # ops * 8 * 8 / 1024: one sixteenth of the float count of 0.170 G
    assert layer.bitop_units == ops * 64
    assert layer.bitops_g == pytest.approx(ops / 16 / 1e9)
    assert round(layer.bitops_g, 4) == 0.0106


@pytest.mark.parametrize("dims,patch,stats", [(HD_LR, None, 1), ((97, 131), 48, None), ((60, 60), 24, None)])
def test_bit_ratio_law_exact(dims, patch, stats):
    stats = (n_tiles(dims, patch), 0)
    fp = exact(uniform(32), SRRESNET, dims, stats, patch)
    for b in (2, 3, 4, 6, 8, 16):
        assert exact(uniform(b), SRRESNET, dims, stats, patch) == fp * Fraction(b * b, 1024)


def test_bit_ratio_law_query_path():
    # all-query mode has no RefER blocks, so the law holds there as well
    net = NetworkConfig(num_resblocks=6, channels=16, num_refer_blocks=1)
    fp = exact(uniform(32, "all_query_no_refer", net), net, (50, 70), (0, 1))
    assert exact(uniform(4, "all_query_no_refer", net), net, (50, 70), (0, 1)) == fp / 64


def test_published_hd_chain():
    fp = count_bitops(uniform(32), SRRESNET, HD_LR, (1, 0))
    assert abs(fp - 148.32) / 148.32 <= 0.10
    # fixing the baseline at the published figure, the chain follows from the ratio law
    for b, published in ((8, 9.27), (4, 2.32)):
        ours = count_bitops(uniform(b), SRRESNET, HD_LR, (1, 0))
        assert abs(ours * 148.32 / fp - published) <= 0.01


def test_published_4k_full_image():
    fp = count_bitops(uniform(32), SRRESNET, (540, 1024), (1, 0))
    assert round(fp, 2) == 1304.60


def test_additivity_and_breakdown():
    plan = make_plan(SRRESNET, BitPolicy(8, 3), "refqsr")
    n = n_tiles((120, 200), 48)
    r = cost_report(plan, SRRESNET, (120, 200), (3, n - 3), 48)
    feature = sum(l.bitops_g for l in r.per_layer if l.path in ("reference", "query"))
    assert abs(r.bitops_g - feature) <= 1e-9 * r.bitops_g
    assert float(r.bitops_exact) == pytest.approx(r.bitops_g, rel=1e-12)
    assert r.unquantized_bitops_g > 0 and r.clustering_bitops_g > 0
    names = {l.name for l in r.per_layer if l.path == "query"}
    assert "refer.14.cost_volume" in names and "blocks.14.conv1" not in names
    d = r.to_dict()
    assert len(d["per_layer"]) == len(r.per_layer) and d["fqr"] == r.fqr


def test_refqsr_cheaper_than_all_reference():
    net = SRRESNET
    ref = cost_report(make_plan(net, BitPolicy(8, 3), "all_reference"), net, (132, 192), (6, 0), 72)
    mixed = cost_report(make_plan(net, BitPolicy(8, 3), "refqsr"), net, (132, 192), (1, 5), 72)
    assert mixed.bitops_g < ref.bitops_g and mixed.fqr < ref.fqr


def test_stats_validation():
    plan = uniform(8)
    with pytest.raises(ValueError):
        count_bitops(plan, SRRESNET, HD_LR, (2, 0))
    with pytest.raises(ValueError):
        count_bitops(plan, SRRESNET, HD_LR, (0, 1))  # no query path in this mode
    with pytest.raises(ValueError):
        count_bitops(uniform(8, "all_query_no_refer"), SRRESNET, HD_LR, (1, 0))


schedule_bits = st.lists(st.tuples(st.integers(2, 32), st.integers(2, 32)), min_size=4, max_size=4)


@given(schedule_bits, schedule_bits, st.integers(0, 3), st.integers(0, 1), st.integers(1, 6))
def test_monotone_in_layer_bits(ref_s, q_s, layer, which, drop):
    net = NetworkConfig(num_resblocks=4, channels=8, num_refer_blocks=1)
    plan = replace(make_plan(net, BitPolicy(8, 3), "refqsr"),
                   reference_schedule=tuple(ref_s), query_schedule=tuple(q_s))
    stats = (4, 5)  # 3 x 3 tiles of 20 on a 30 x 30 image
    sched = list(plan.query_schedule)
    wb, ab = sched[layer]
    sched[layer] = (max(2, wb - drop), ab) if which == 0 else (wb, max(2, ab - drop))
    lower = replace(plan, query_schedule=tuple(sched))
    a = cost_report(plan, net, (30, 30), stats, 20)
    b = cost_report(lower, net, (30, 30), stats, 20)
    assert b.bitops_g <= a.bitops_g
    # FQR skips 32-bit entries, so only moves among quantized widths are monotone
    if max(q_s[layer]) < 32:
        assert b.fqr <= a.fqr
    assert 2 <= a.fqr <= 32


def test_fqr_jumps_when_a_layer_becomes_quantized():
    net = NetworkConfig(num_resblocks=4, channels=8, num_refer_blocks=1)
    plan = replace(make_plan(net, BitPolicy(8, 3), "all_query_no_refer"),
                   query_schedule=((2, 2), (2, 2), (2, 2), (2, 32)))
    lower = replace(plan, query_schedule=((2, 2), (2, 2), (2, 2), (2, 31)))
    assert compute_fqr(plan, (0, 1)) == 2.0 and compute_fqr(lower, (0, 1)) == 37 / 4


# -- FQR ------------------------------------------------------------------------


def test_fqr_uniform_and_degenerate():
    for stats in ((1, 0), (7, 0)):
        assert compute_fqr(uniform(8), stats) == 8.0
    assert compute_fqr(uniform(8, "all_query_no_refer"), (0, 5)) == 8.0
    assert compute_fqr(make_plan(SRRESNET, BitPolicy(8, 3), "all_reference"), (4, 0)) == 8.0
    assert compute_fqr(uniform(32), (3, 0)) == 32.0


def test_fqr_one_ref_one_query_enumeration():
    plan = make_plan(SRRESNET, BitPolicy(8, 3), "refqsr")
    # reference: 16 x 8; query: block 0 at 8, 13 low blocks at 3, 2 RefER at 8
    entries = [8] * 16 + [8] + [3] * 13 + [8] * 2
    assert [a for _, a in plan.query_schedule] == entries[16:]
    assert Fraction(sum(entries), 32) == Fraction(191, 32)
    assert compute_fqr(plan, (1, 1)) == 191 / 32


# -- params ---------------------------------------------------------------------


def test_param_examples():
    assert 9 * 64 * 64 + 64 == 36_928
    b = param_breakdown(SRRESNET)
    assert b["resblocks"] == 32 * 36_928
    assert abs(b["refer"] / 1e6 - 0.04) <= 0.005
    k0 = NetworkConfig(num_refer_blocks=0)
    plan = make_plan(k0, BitPolicy(8, 3), "all_reference")
    assert count_params(k0, plan) * 1e6 == param_breakdown(k0)["backbone"]


def test_params_independent_of_patch_counts():
    plan = make_plan(SRRESNET, BitPolicy(8, 3), "refqsr")
    a = cost_report(plan, SRRESNET, (132, 192), (1, 5), 72)
    b = cost_report(plan, SRRESNET, (132, 192), (3, 3), 72)
    assert a.params_m == b.params_m and a.params_bitweighted_m == b.params_bitweighted_m
    assert a.params_bitweighted_m < a.params_m
