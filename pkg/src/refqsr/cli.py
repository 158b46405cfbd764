"""Command-line interface.

    refqsr init-random --seed 7 --out w.json
    refqsr sr --weights w.json --image lr.ppm --out sr.ppm --report r.json
    refqsr cluster --image lr.ppm --out clusters.json --map map.ppm
    refqsr cost --arch srresnet --size 1280x720 --bits 32,8,4
    refqsr metrics --a sr.ppm --b hr.ppm
    refqsr pairs --lr lr_dir --hr hr_dir --out pairs_dir
    refqsr export-flow --weights w.json --image lr.ppm --out flows.npz

Every subcommand accepts ``--config file.json`` whose keys mirror the flag
names; explicit flags win.  Failures print one JSON object on stderr and
exit with status 1 (usage errors: 2).
"""
from __future__ import annotations

import argparse
import colorsys
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clustblock import cluster, extract_features
from .config import MODES, NetworkConfig, RunConfig, TilingConfig
from .cost_model import cost_report, make_plan, patch_geometry
from .errors import RefQSRError
from .imageio import load_image, save_image
from .metrics import psnr, sample_training_pairs, ssim
from .pipeline import quantized_inference, run_refqsr, tile_image
from .quantizer import FULL_PRECISION, derive_bit_policy
from .weights import ModelWeights, default_clustblock, init_random, load_weights, save_weights

log = logging.getLogger("refqsr")

REPORT_VERSION = 1
ARCHS = {"srresnet": NetworkConfig()}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "UsageError", "message": message}) + "\n")
        raise SystemExit(2)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _size(text: str) -> tuple[int, int]:
    """'WxH' -> (W, H)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 1280x720, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _policy_list(text: str) -> list[tuple[int, int]]:
    out = []
    for item in str(text).split(","):
        if not item:
            continue
        try:
            hi, lo = (int(v) for v in item.split("-"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"policies look like 8-3,8-4, got {text!r}") from None
        out.append((hi, lo))
    return out


def _weights(path: str | None, seed: int) -> ModelWeights:
    if path:
        return load_weights(path)
    log.warning("no --weights given; using random weights (seed %d)", seed)
    return init_random(NetworkConfig(), seed)


def _run_config(args) -> RunConfig:
    return RunConfig(
        b_high=args.b_high, b_low=args.b_low, tau=args.tau, patch_size=args.patch_size,
        overlap=args.overlap, mode=args.mode if args.mode in MODES else "all_reference",
        temperature=args.temperature, flow_mode=args.flow_mode, seed=args.seed,
    )


# -- subcommands -----------------------------------------------------------------


def cmd_init_random(args) -> int:
    net = NetworkConfig(
        num_resblocks=args.resblocks, channels=args.channels, scale_factor=args.scale,
        num_refer_blocks=args.refer_blocks,
    )
    w = init_random(net, args.seed)
    blob = save_weights(w, args.out)
    print(_dump({"manifest": str(args.out), "blob": str(blob), "arch": net.to_dict(), "seed": args.seed}), end="")
    return 0


def cmd_sr(args) -> int:
    cfg = _run_config(args)
    weights = _weights(args.weights, cfg.seed)
    image = load_image(args.image)
    policy = derive_bit_policy(cfg.b_high, cfg.b_low)
    if args.mode == "baseline":
        hr = quantized_inference(image, weights, cfg.tiling, cfg.b_high)
        grid = tile_image(image, cfg.tiling)
        plan = make_plan(weights.net, policy, "all_reference")
        report = cost_report(plan, weights.net, grid.image_size, (len(grid), 0), cfg.patch_size, cfg.overlap)
        assignment = None
    else:
        res = run_refqsr(image, weights, tiling=cfg.tiling, policy=policy, tau=cfg.tau, mode=cfg.mode,
                         temperature=cfg.temperature, flow_mode=cfg.flow_mode)
        hr, report, assignment = res.image, res.report, res.assignment
    save_image(args.out, hr)
    _, _, h, w = image.shape
    n_ref = len(assignment.references) if assignment else (0 if args.mode == "all_query_no_refer" else None)
    n_patches = len(tile_image(image, cfg.tiling))
    if n_ref is None:
        n_ref = n_patches
    summary = {
        "report_version": REPORT_VERSION,
        "mode": args.mode,
        "config": {**cfg.__dict__, "mode": args.mode},
        "arch": weights.net.to_dict(),
        "lr_size": [h, w],
        "hr_size": list(hr.shape[-2:]),
        "n_patches": n_patches,
        "n_reference": n_ref,
        "n_query": n_patches - n_ref,
        "cost": report.to_dict(),
        "assignment": assignment.to_dict() if assignment else None,
    }
    if args.report:
        Path(args.report).write_text(_dump(summary))
    print(_dump({k: summary[k] for k in ("mode", "n_patches", "n_reference", "n_query")}
                | {"bitops_g": report.bitops_g, "fqr": report.fqr}), end="")
    return 0


def _palette(k: int) -> tuple[float, float, float]:
    hue = (k * 0.6180339887498949) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.65, 0.95)


def cluster_map(grid, assignment) -> np.ndarray:
    """3 x H x W image painting every patch core with its cluster colour;
    references are drawn brighter than their queries."""
    h, w = grid.image_size
    out = np.zeros((3, h, w), dtype=np.float32)
    order = {r: n for n, r in enumerate(assignment.references)}
    for i, (r0, r1, c0, c1) in enumerate(grid.cores):
        ref = assignment.ref_of[i]
        rgb = np.array(_palette(order[ref]), dtype=np.float32)
        if ref != i:
            rgb = rgb * 0.6
        out[:, r0:r1, c0:c1] = rgb[:, None, None]
    return out


def cmd_cluster(args) -> int:
    image = load_image(args.image)
    clust = load_weights(args.weights).clust() if args.weights else default_clustblock()
    grid = tile_image(image, TilingConfig(args.patch_size, args.overlap))
    assignment = cluster(extract_features(grid, clust), args.tau)
    doc = {**assignment.to_dict(), "tau": args.tau, "origins": [list(o) for o in grid.origins],
           "patch_size": list(grid.patch_size)}
    text = _dump(doc)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    if args.map:
        save_image(args.map, cluster_map(grid, assignment))
    return 0


def cost_rows(net: NetworkConfig, size: tuple[int, int], bits: list[int], policies: list[tuple[int, int]],
              patch_size: int | None, overlap: int, query_fraction: float) -> list[dict]:
    """Method / BitOPs / FQR / params rows.  ``size`` is the HR (W, H); accounting runs on the
    LR grid.  Uniform rows run image-wise unless ``patch_size`` is given;
    RefQSR rows are always patch-wise (default 72) with the requested share
    of query patches."""
    w, h = size
    lr = (h // net.scale_factor, w // net.scale_factor)
    rows = []
    for b in bits:
        plan = make_plan(net, derive_bit_policy(b, b), "all_reference")
        _, _, n = patch_geometry(lr, patch_size, overlap)
        rep = cost_report(plan, net, lr, (n, 0), patch_size, overlap)
        rows.append({"method": "full precision" if b >= FULL_PRECISION else f"uniform {b}-bit",
                     "bits": [b, b], "patches": [n, 0], **_cost_fields(rep)})
    for hi, lo in policies:
        ps = patch_size or 72
        _, _, n = patch_geometry(lr, ps, overlap)
        n_query = min(n - 1, int(round(query_fraction * n)))
        plan = make_plan(net, derive_bit_policy(hi, lo), "refqsr")
        rep = cost_report(plan, net, lr, (n - n_query, n_query), ps, overlap)
        rows.append({"method": f"refqsr {hi}-{lo}", "bits": [hi, lo], "patches": [n - n_query, n_query],
                     **_cost_fields(rep)})
    return rows


def _cost_fields(rep) -> dict:
    return {"bitops_g": rep.bitops_g, "fqr": rep.fqr, "params_m": rep.params_m,
            "params_bitweighted_m": rep.params_bitweighted_m,
            "unquantized_bitops_g": rep.unquantized_bitops_g, "clustering_bitops_g": rep.clustering_bitops_g}


def cmd_cost(args) -> int:
    net = NetworkConfig(**{**ARCHS[args.arch].to_dict(), "scale_factor": args.scale})
    rows = cost_rows(net, args.size, args.bits, args.policy, args.patch_size, args.overlap, args.query_fraction)
    if args.json:
        print(_dump({"arch": args.arch, "size": list(args.size), "scale": args.scale, "rows": rows}), end="")
        return 0
    print(f"{'method':<18} {'BitOPs(G)':>10} {'FQR':>6} {'Params(M)':>10}")
    for r in rows:
        print(f"{r['method']:<18} {r['bitops_g']:>10.2f} {r['fqr']:>6.2f} {r['params_m']:>10.3f}")
    return 0


def _image_pairs(a: Path, b: Path) -> list[tuple[Path, Path]]:
    if a.is_dir() != b.is_dir():
        raise ValueError("--a and --b must both be files or both be directories")
    if not a.is_dir():
        return [(a, b)]
    names = sorted(p.name for p in a.iterdir() if p.suffix.lower() in (".ppm", ".png"))
    missing = [n for n in names if not (b / n).exists()]
    if missing:
        raise ValueError(f"{len(missing)} images in {a} have no counterpart in {b}: {missing[:3]}")
    return [(a / n, b / n) for n in names]


def cmd_metrics(args) -> int:
    rows = []
    for pa, pb in _image_pairs(Path(args.a), Path(args.b)):
        x, y = load_image(pa), load_image(pb)
        if args.crop:
            c = args.crop
            x, y = x[..., c:-c, c:-c], y[..., c:-c, c:-c]
        rows.append({"a": str(pa), "b": str(pb), "psnr": psnr(x, y), "ssim": ssim(x, y)})
    doc = {"pairs": rows,
           "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else None,
           "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else None}
    print(_dump(doc), end="")
    return 0


def cmd_pairs(args) -> int:
    lr_dir, hr_dir, out = Path(args.lr), Path(args.hr), Path(args.out)
    pairs = _image_pairs(lr_dir, hr_dir)
    images = [(load_image(l), load_image(h)) for l, h in pairs]
    clust = load_weights(args.weights).clust() if args.weights else default_clustblock()
    samples = sample_training_pairs(images, clust, args.tau, args.n, args.max_retries, args.crop, args.seed)
    for sub in ("lr_q", "hr_q", "lr_r", "hr_r"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        name = f"{k:05d}.ppm"
        for sub, img in (("lr_q", s.query_lr), ("hr_q", s.query_hr), ("lr_r", s.ref_lr), ("hr_r", s.ref_hr)):
            save_image(out / sub / name, img)
        entries.append({"file": name, "source": pairs[s.image_index][0].name, "similarity": s.similarity,
                        "query_origin": list(s.query_origin), "ref_origin": list(s.ref_origin)})
    (out / "manifest.json").write_text(_dump({"tau": args.tau, "seed": args.seed, "crop": args.crop, "pairs": entries}))
    print(_dump({"written": len(entries), "out": str(out)}), end="")
    return 0


def cmd_export_flow(args) -> int:
    cfg = _run_config(args)
    weights = _weights(args.weights, cfg.seed)
    res = run_refqsr(load_image(args.image), weights, tiling=cfg.tiling,
                     policy=derive_bit_policy(cfg.b_high, cfg.b_low), tau=cfg.tau, mode="refqsr",
                     temperature=cfg.temperature, flow_mode=cfg.flow_mode)
    arrays = {f"patch{q}_block{k}": f.values for q, per in sorted(res.flows.items()) for k, f in sorted(per.items())}
    out = Path(args.out)
    if out.suffix == ".npz":
        np.savez(out, **arrays)
    else:
        out.write_text(_dump({name: a.tolist() for name, a in arrays.items()}))
    print(_dump({"flows": sorted(arrays), "ref_of": res.assignment.to_dict()["ref_of"]}), end="")
    return 0


# -- parser ------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    d = RunConfig()
    p.add_argument("--weights", help="weight manifest (JSON); random weights if omitted")
    p.add_argument("--image", required=True, help="LR input image (.ppm or .png)")
    p.add_argument("--b-high", type=int, default=d.b_high)
    p.add_argument("--b-low", type=int, default=d.b_low)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--patch-size", type=int, default=d.patch_size)
    p.add_argument("--overlap", type=int, default=d.overlap)
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--flow-mode", choices=("hard", "soft"), default=d.flow_mode)
    p.add_argument("--seed", type=int, default=d.seed)
    if with_mode:
        p.add_argument("--mode", choices=MODES + ("baseline",), default=d.mode)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refqsr", description="Reference-based mixed-precision SR inference.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with default values for the flags below")
        p.set_defaults(func=fn)
        return p

    p = add("sr", cmd_sr, "super-resolve one image")
    _run_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the JSON run report here")

    p = add("cluster", cmd_cluster, "dump the patch clustering of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--weights", help="manifest holding ClustBlock tensors; bundled ones if omitted")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--patch-size", type=int, default=72)
    p.add_argument("--overlap", type=int, default=6)
    p.add_argument("--out", help="JSON output (stdout if omitted)")
    p.add_argument("--map", help="colourised cluster map image")

    p = add("cost", cmd_cost, "BitOPs / FQR / params table, no weights needed")
    p.add_argument("--arch", choices=sorted(ARCHS), default="srresnet")
    p.add_argument("--size", type=_size, default=(1280, 720), help="HR size WxH")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=4)
    p.add_argument("--bits", type=_int_list, default=[32, 8, 4], help="uniform bit-widths, e.g. 32,8,4")
    p.add_argument("--policy", type=_policy_list, default=[], help="RefQSR (b_high-b_low) pairs, e.g. 8-3,8-4")
    p.add_argument("--patch-size", type=int, default=None, help="patch-wise accounting for uniform rows")
    p.add_argument("--overlap", type=int, default=6)
    p.add_argument("--query-fraction", type=float, default=0.5)
    p.add_argument("--json", action="store_true")

    p = add("metrics", cmd_metrics, "PSNR / SSIM between two images or directories")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--crop", type=int, default=0, help="border pixels to ignore")

    p = add("pairs", cmd_pairs, "sample (query, reference) training crop pairs")
    p.add_argument("--lr", required=True, help="directory of LR images")
    p.add_argument("--hr", required=True, help="directory of HR images with the same names")
    p.add_argument("--out", required=True)
    p.add_argument("--weights")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--max-retries", type=int, default=100)
    p.add_argument("--crop", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)

    p = add("export-flow", cmd_export_flow, "run RefQSR and save every query patch's RefER flow")
    _run_flags(p, with_mode=False)
    p.add_argument("--out", required=True, help=".npz or .json")
    p.set_defaults(mode="refqsr")

    p = add("init-random", cmd_init_random, "write a runnable random checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resblocks", type=int, default=16)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--refer-blocks", type=int, default=2)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Config-file values become subcommand defaults before the real parse."""
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in choices), None)
    if path and command:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"cannot read config {path}: {e}") from e
        sub = choices[command]
        actions = {a.dest: a for a in sub._actions if a.dest not in ("config", "help")}
        defaults = {}
        for key, value in cfg.items():
            action = actions.get(key.replace("-", "_"))
            if action is None:
                raise ValueError(f"unknown config key {key!r} for '{command}'")
            if action.type is not None and isinstance(value, str):
                value = action.type(value)
            elif isinstance(value, list) and action.dest == "size":
                value = tuple(value)
            defaults[action.dest] = value
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (RefQSRError, ValueError, OSError, KeyError) as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
