"""Mode ablation with random weights on a self-similar image.

    python scripts/ablation_quality.py --seeds 5
    python scripts/ablation_quality.py --head-gain 0.1   # random RefER heads

For each seed: PSNR of the refqsr and all_query_no_refer outputs against the
all_reference output (the high-bit path), plus the BitOPs and FQR of each
mode.  With the default zero-initialised RefER heads the query path skips
its last K blocks, so refqsr sits further from the high-bit output than
plain low-bit blocks do.  --head-gain replaces the zero layer with He-normal
weights scaled by the given gain.
"""
import argparse

import numpy as np

from refqsr.config import NetworkConfig
from refqsr.metrics import psnr
from refqsr.pipeline import run_refqsr
from refqsr.quantizer import derive_bit_policy
from refqsr.weights import init_random, refer_layer_dims

MODES = ("all_reference", "refqsr", "all_query_no_refer")


def self_similar(seed, h=132, w=192, period=20):
    tile = np.random.default_rng(seed).random((3, period, period)).astype(np.float32)
    return np.tile(tile, (1, h // period + 1, w // period + 1))[:, :h, :w].copy()


def weights_for(net, seed, head_gain):
    w = init_random(net, seed=seed)
    if head_gain:
        rng = np.random.default_rng(seed + 10_000)
        last = len(refer_layer_dims(net)) - 1
        for k in range(net.num_refer_blocks):
            name = f"refer.{k}.layers.{last}.weight"
            fan_in = int(np.prod(w[name].shape[1:]))
            w.tensors[name] = (rng.standard_normal(w[name].shape) * head_gain * np.sqrt(2 / fan_in)).astype(np.float32)
    return w


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--b-high", type=int, default=8)
    ap.add_argument("--b-low", type=int, default=3)
    ap.add_argument("--head-gain", type=float, default=0.0)
    ap.add_argument("--tau", type=float, default=0.5)
    args = ap.parse_args()

    net = NetworkConfig()
    policy = derive_bit_policy(args.b_high, args.b_low)
    print(f"{'seed':>4} {'psnr refqsr':>12} {'psnr no-refer':>14} {'bitops ref/rq/nr (G)':>24} {'fqr ref/rq/nr':>18}")
    wins = 0
    for seed in range(args.seeds):
        w = weights_for(net, seed, args.head_gain)
        img = self_similar(seed)
        res = {m: run_refqsr(img, w, policy=policy, tau=args.tau, mode=m) for m in MODES}
        hi = res["all_reference"].image
        p_rq, p_nr = psnr(res["refqsr"].image, hi), psnr(res["all_query_no_refer"].image, hi)
        wins += p_rq >= p_nr
        bops = "/".join(f"{res[m].report.bitops_g:.2f}" for m in MODES)
        fqr = "/".join(f"{res[m].report.fqr:.2f}" for m in MODES)
        print(f"{seed:>4} {p_rq:>12.2f} {p_nr:>14.2f} {bops:>24} {fqr:>18}")
    print(f"refqsr at least as close to the high-bit output on {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
