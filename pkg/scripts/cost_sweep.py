"""BitOPs / FQR / params sweep for the SRResNet-style backbone.

    python scripts/cost_sweep.py                 # x4, 1280x720 output
    python scripts/cost_sweep.py --size 4096x2160 --json out.json

Prints three tables: uniform precisions (image-wise), RefQSR policies over a
range of query fractions (patch-wise, patch 72), and the image-wise vs
patch-wise gap as a function of patch size.
"""
import argparse
import json

from refqsr.cli import cost_rows
from refqsr.config import NetworkConfig
from refqsr.cost_model import cost_report, make_plan, patch_geometry
from refqsr.quantizer import derive_bit_policy


def size(text):
    w, h = (int(v) for v in text.lower().split("x"))
    return w, h


def table(title, rows, cols):
    print(f"\n{title}")
    print("  ".join(f"{c:>14}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>14.3f}" if isinstance(r[c], float) else f"{str(r[c]):>14}" for c in cols))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=size, default=(1280, 720), help="HR WxH")
    ap.add_argument("--scale", type=int, default=4)
    ap.add_argument("--json", help="also dump every row here")
    args = ap.parse_args()

    net = NetworkConfig(scale_factor=args.scale)
    w, h = args.size
    lr = (h // args.scale, w // args.scale)

    uni = cost_rows(net, args.size, [32, 16, 8, 6, 4, 3, 2], [], None, 6, 0.5)
    table(f"uniform precision, image-wise, LR {lr[1]}x{lr[0]}", uni, ["method", "bitops_g", "fqr", "params_m"])

    mixed = []
    for hi, lo in ((8, 4), (8, 3), (6, 3), (4, 2)):
        for frac in (0.25, 0.5, 0.75, 0.9):
            r = cost_rows(net, args.size, [], [(hi, lo)], None, 6, frac)[0]
            mixed.append({**r, "query_fraction": frac, "queries": r["patches"][1]})
    table("RefQSR, patch-wise (72, overlap 6)", mixed,
          ["method", "query_fraction", "queries", "bitops_g", "fqr", "clustering_bitops_g"])

    fp = make_plan(net, derive_bit_policy(32, 32), "all_reference")
    tiles = []
    for p in (None, 48, 72, 96, 128, 192):
        _, _, n = patch_geometry(lr, p, 6)
        rep = cost_report(fp, net, lr, (n, 0), p, 6)
        tiles.append({"patch": p or "image", "tiles": n, "bitops_g": rep.bitops_g,
                      "unquantized_bitops_g": rep.unquantized_bitops_g})
    table("full precision, image-wise vs patch-wise", tiles, ["patch", "tiles", "bitops_g", "unquantized_bitops_g"])

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"size": list(args.size), "scale": args.scale, "uniform": uni, "refqsr": mixed,
                       "tiling": tiles}, fh, indent=2, default=str)


if __name__ == "__main__":
    main()
