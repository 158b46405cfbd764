"""Dataclass configs shared across the pipeline, cost model and CLI."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

MODES = ("refqsr", "all_reference", "all_query_no_refer")


@dataclass(frozen=True)
class NetworkConfig:
    """SRResNet-style backbone: conv head, residual blocks, global-skip conv,
    pixel-shuffle upsampler and a conv tail.  Only the residual blocks (and the
    RefER blocks that replace the last ``num_refer_blocks`` of them on the query
    path) are quantized."""

    num_resblocks: int = 16
    channels: int = 64
    scale_factor: int = 4
    num_refer_blocks: int = 2
    head_kernel: int = 9
    tail_kernel: int = 9
    refer_hidden: int | None = None  # defaults to channels // 2
    refer_depth: int = 2
    clust_classes: int = 47

    def __post_init__(self):
        if self.scale_factor not in (2, 3, 4):
            raise ValueError(f"scale_factor must be 2, 3 or 4, got {self.scale_factor}")
        if self.num_resblocks < 1 or self.channels < 1:
            raise ValueError("need at least one residual block and one channel")
        if not 0 <= self.num_refer_blocks < self.num_resblocks:
            raise ValueError(
                f"num_refer_blocks={self.num_refer_blocks} must lie in [0, {self.num_resblocks})"
            )
        if self.head_kernel % 2 == 0 or self.tail_kernel % 2 == 0:
            raise ValueError("head/tail kernels must be odd")
        if self.refer_depth < 1 or self.hidden < 1:
            raise ValueError("RefER head needs depth >= 1 and width >= 1")

    @property
    def hidden(self) -> int:
        return self.refer_hidden if self.refer_hidden is not None else max(1, self.channels // 2)

    @property
    def refer_blocks(self) -> tuple[int, ...]:
        """Block indices replaced by RefER on the query path (the last K)."""
        n, k = self.num_resblocks, self.num_refer_blocks
        return tuple(range(n - k, n))

    @property
    def upsample_steps(self) -> tuple[int, ...]:
        return (3,) if self.scale_factor == 3 else (2,) * (self.scale_factor // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class TilingConfig:
    patch_size: int = 72
    overlap: int = 6

    def __post_init__(self):
        if self.overlap < 0 or self.patch_size <= 2 * self.overlap:
            raise ValueError(
                f"patch_size ({self.patch_size}) must exceed 2 * overlap ({self.overlap})"
            )

    @property
    def stride(self) -> int:
        return self.patch_size - 2 * self.overlap


@dataclass(frozen=True)
class RunConfig:
    """Every knob of an ``sr`` run; the JSON config file mirrors these names."""

    b_high: int = 8
    b_low: int = 3
    tau: float = 0.5
    patch_size: int = 72
    overlap: int = 6
    mode: str = "refqsr"
    temperature: float = 1000.0
    flow_mode: str = "hard"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.flow_mode not in ("hard", "soft"):
            raise ValueError(f"flow_mode must be 'hard' or 'soft', got {self.flow_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        TilingConfig(self.patch_size, self.overlap)
        from .quantizer import derive_bit_policy

        derive_bit_policy(self.b_high, self.b_low)

    @property
    def tiling(self) -> TilingConfig:
        return TilingConfig(self.patch_size, self.overlap)
