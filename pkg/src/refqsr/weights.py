"""Named weight sets and the manifest + blob checkpoint format.

A checkpoint is a JSON manifest next to a raw blob of little-endian float32
values::

    {
      "format_version": 1,
      "arch": {...NetworkConfig fields...},
      "blob": "weights.bin",
      "tensors": [{"name": ..., "shape": [...], "byte_offset": ...}, ...],
      "quant_params": {"backbone.blocks.3.conv1": {"alpha": ..., "beta": ...}, ...}
    }

``quant_params`` holds activation clip bounds per quantized backbone layer.
Layers without an entry are calibrated per tensor with min/max at run time.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import NetworkConfig
from .errors import WeightLoadError
from .quantizer import fake_quant
from .tensor_core import DTYPE

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CLUST_WIDTHS = (64, 64, 32)


def _conv(shapes: dict, name: str, c_out: int, c_in: int, k: int) -> None:
    shapes[f"{name}.weight"] = (c_out, c_in, k, k)
    shapes[f"{name}.bias"] = (c_out,)


def backbone_shapes(net: NetworkConfig) -> dict[str, tuple[int, ...]]:
    c = net.channels
    shapes: dict[str, tuple[int, ...]] = {}
    _conv(shapes, "backbone.head", c, 3, net.head_kernel)
    for i in range(net.num_resblocks):
        _conv(shapes, f"backbone.blocks.{i}.conv1", c, c, 3)
        _conv(shapes, f"backbone.blocks.{i}.conv2", c, c, 3)
    _conv(shapes, "backbone.body_end", c, c, 3)
    for j, r in enumerate(net.upsample_steps):
        _conv(shapes, f"backbone.up.{j}", c * r * r, c, 3)
    _conv(shapes, "backbone.tail", 3, c, net.tail_kernel)
    return shapes


def refer_layer_dims(net: NetworkConfig) -> list[tuple[int, int, int]]:
    """(c_out, c_in, kernel) for each conv of one RefER refinement head."""
    c, h, d = net.channels, net.hidden, net.refer_depth
    if d == 1:
        return [(c, c, 3)]
    return [(h, c, 3)] + [(h, h, 1)] * (d - 2) + [(c, h, 1)]


def refer_shapes(net: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for k in range(net.num_refer_blocks):
        for l, (co, ci, ks) in enumerate(refer_layer_dims(net)):
            _conv(shapes, f"refer.{k}.layers.{l}", co, ci, ks)
    return shapes


def clust_shapes(classes: int) -> dict[str, tuple[int, ...]]:
    w1, w2, w3 = CLUST_WIDTHS
    shapes: dict[str, tuple[int, ...]] = {}
    _conv(shapes, "clust.conv1", w1, 3, 3)
    _conv(shapes, "clust.conv2", w2, w1, 3)
    _conv(shapes, "clust.conv3", w3, w2, 3)
    shapes["clust.fc.weight"] = (classes, w3)
    shapes["clust.fc.bias"] = (classes,)
    return shapes


def expected_shapes(net: NetworkConfig, include_clust: bool = True) -> dict[str, tuple[int, ...]]:
    shapes = {**backbone_shapes(net), **refer_shapes(net)}
    if include_clust:
        shapes.update(clust_shapes(net.clust_classes))
    return shapes


@dataclass
class ModelWeights:
    net: NetworkConfig
    tensors: dict[str, np.ndarray]
    act_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    _qcache: dict = field(default_factory=dict, repr=False, compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def conv(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"]

    def quantized_weight(self, name: str, bits: int) -> np.ndarray:
        """``name``.weight fake-quantized at ``bits`` (min/max), cached per
        (layer, bits) since weights never change during a run."""
        key = (name, bits)
        if key not in self._qcache:
            self._qcache[key] = fake_quant(self.tensors[f"{name}.weight"], bits)
        return self._qcache[key]

    def refer_head(self, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.conv(f"refer.{k}.layers.{l}") for l in range(len(refer_layer_dims(self.net)))]

    def clust(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("clust.")}

    def validate(self) -> None:
        for name, shape in expected_shapes(self.net).items():
            if name not in self.tensors:
                raise WeightLoadError(f"missing tensor {name!r}")
            if tuple(self.tensors[name].shape) != shape:
                raise WeightLoadError(
                    f"tensor {name!r} has shape {tuple(self.tensors[name].shape)}, arch expects {shape}"
                )


def _he(rng: np.random.Generator, shape: tuple[int, ...], gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def random_tensors(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator, res_scale: float = 0.1) -> dict[str, np.ndarray]:
    """He-normal convs, small biases.  Residual-branch output convs (ResBlock
    conv2 and the last layer of each RefER head) are scaled by ``res_scale``
    to keep a deep random stack numerically tame."""
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            out[name] = (rng.standard_normal(shape) * 0.01).astype(DTYPE)
            continue
        gain = 1.0
        if name.endswith("conv2.weight") and name.startswith("backbone.blocks"):
            gain = res_scale
        out[name] = _he(rng, shape, gain)
    return out


def init_random(net: NetworkConfig, seed: int = 0, clust: dict[str, np.ndarray] | None = None) -> ModelWeights:
    """A runnable random checkpoint.  RefER heads start at zero on their last
    layer, the usual initialisation for a residual correction branch, so an
    untrained head contributes nothing."""
    rng = np.random.default_rng(seed)
    tensors = random_tensors({**backbone_shapes(net), **refer_shapes(net)}, rng)
    depth = len(refer_layer_dims(net))
    for k in range(net.num_refer_blocks):
        last = f"refer.{k}.layers.{depth - 1}"
        tensors[f"{last}.weight"][:] = 0
        tensors[f"{last}.bias"][:] = 0
    if clust is None:
        clust = default_clustblock(net.clust_classes, rng)
    tensors.update(clust)
    w = ModelWeights(net, tensors)
    w.validate()
    return w


def default_clustblock(classes: int = 47, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """The bundled frozen ClustBlock checkpoint (47 classes), or a fresh random
    one when another class count is requested."""
    if classes == 47 and rng is None:
        ref = resources.files("refqsr") / "data" / "clustblock_default.json"
        with resources.as_file(ref) as path:
            if path.exists():
                tensors, _, _ = read_checkpoint(path)
                return tensors
    rng = rng if rng is not None else np.random.default_rng(0)
    return random_tensors(clust_shapes(classes), rng)


# -- manifest + blob --------------------------------------------------------


def write_checkpoint(
    manifest_path: str | Path,
    tensors: dict[str, np.ndarray],
    arch: dict | None = None,
    quant_params: dict[str, tuple[float, float]] | None = None,
    blob_path: str | Path | None = None,
) -> Path:
    manifest_path = Path(manifest_path)
    blob_path = Path(blob_path) if blob_path else manifest_path.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "byte_offset": offset})
            offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": arch or {},
        "blob": blob_path.name if blob_path.parent == manifest_path.parent else str(blob_path),
        "tensors": entries,
        "quant_params": {
            k: {"alpha": float(a), "beta": float(b)} for k, (a, b) in sorted((quant_params or {}).items())
        },
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return blob_path


def read_checkpoint(manifest_path: str | Path, blob_path: str | Path | None = None):
    """Returns (tensors, arch dict, activation bounds) after validating layout."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise WeightLoadError(f"cannot read manifest {manifest_path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise WeightLoadError(f"unsupported manifest format_version {version!r}")
    if blob_path is None:
        blob_path = manifest_path.parent / manifest.get("blob", manifest_path.with_suffix(".bin").name)
    try:
        blob = Path(blob_path).read_bytes()
    except OSError as e:
        raise WeightLoadError(f"cannot read blob {blob_path}: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["byte_offset"]
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off != expected_offset:
            kind = "overlaps the previous tensor" if off < expected_offset else "leaves a gap"
            raise WeightLoadError(f"tensor {name!r} at offset {off} {kind} (expected {expected_offset})")
        if off + nbytes > len(blob):
            raise WeightLoadError(
                f"blob truncated: tensor {name!r} needs bytes [{off}, {off + nbytes}) "
                f"but blob has {len(blob)}"
            )
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).astype(DTYPE).reshape(shape)
        expected_offset = off + nbytes
    if expected_offset != len(blob):
        raise WeightLoadError(f"blob has {len(blob) - expected_offset} trailing bytes after the last tensor")
    bounds = {k: (float(v["alpha"]), float(v["beta"])) for k, v in manifest.get("quant_params", {}).items()}
    return tensors, manifest.get("arch", {}), bounds


def save_weights(weights: ModelWeights, manifest_path: str | Path, blob_path: str | Path | None = None) -> Path:
    return write_checkpoint(manifest_path, weights.tensors, weights.net.to_dict(), weights.act_bounds, blob_path)


def load_weights(manifest_path: str | Path, blob_path: str | Path | None = None) -> ModelWeights:
    tensors, arch, bounds = read_checkpoint(manifest_path, blob_path)
    try:
        net = NetworkConfig.from_dict(arch)
    except (TypeError, ValueError) as e:
        raise WeightLoadError(f"invalid arch in manifest: {e}") from e
    if not any(k.startswith("clust.") for k in tensors):
        log.warning("manifest has no ClustBlock tensors; using the bundled frozen ClustBlock")
        tensors.update(default_clustblock(net.clust_classes))
    weights = ModelWeights(net, tensors, bounds)
    weights.validate()
    quantized = [f"backbone.blocks.{i}.conv{j}" for i in range(net.num_resblocks) for j in (1, 2)]
    missing = [n for n in quantized if n not in bounds]
    if missing:
        log.warning(
            "%d of %d quantized layers have no activation bounds; falling back to min/max calibration",
            len(missing), len(quantized),
        )
    return weights
