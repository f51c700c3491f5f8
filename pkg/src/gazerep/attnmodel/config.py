"""Network configuration vocabulary and the per-mode layer plan.

The plan is the flat, forward-ordered list of spatial operations a config
expands to. Both network modes, the receptive-field report and the probe
extents are derived from it, so there is one place that decides strides,
dilations and paddings.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from ..numcore.functional import conv_output_size

BLOCK_TYPES = ("plain", "bottleneck")
MODES = ("classification", "attention")


class ConfigError(ValueError):
    pass


@dataclass
class StemConfig:
    kernel: int = 3
    channels: int = 8
    stride: int = 1


@dataclass
class StageConfig:
    name: str
    block: str = "bottleneck"
    repeat: int = 1
    channels: int = 64
    kernel: int = 3
    stride: int = 1  # stride of the first block
    groups: int = 1
    se_ratio: Optional[int] = None
    pool: Optional[tuple] = None  # leading max pool (kernel, stride)
    width: Optional[int] = None  # bottleneck inner width, default channels // 2

    @property
    def inner(self) -> int:
        return self.width if self.width is not None else self.channels // 2


@dataclass
class NetworkConfig:
    name: str
    stages: list
    input_size: tuple = (64, 80)
    in_channels: int = 1
    stem: Optional[StemConfig] = None
    n_dilate: int = 0
    head_width: int = 256

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        for s in d["stages"]:
            if s["pool"] is not None:
                s["pool"] = list(s["pool"])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        try:
            d = dict(d)
            stages = [StageConfig(**{**s, "pool": tuple(s["pool"]) if s.get("pool") else None})
                      for s in d.pop("stages")]
            stem = d.pop("stem", None)
            cfg = cls(stages=stages, stem=StemConfig(**stem) if stem else None,
                      **{**d, "input_size": tuple(d.get("input_size", (64, 80)))})
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"network config: {exc}") from exc
        cfg.validate()
        return cfg

    def with_(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)

    def validate(self) -> None:
        H, W = self.input_size
        if H < 1 or W < 1 or self.in_channels < 1:
            raise ConfigError("input_size and in_channels must be positive")
        if not self.stages:
            raise ConfigError("stages: at least one stage required")
        if self.head_width < 1:
            raise ConfigError("head_width must be positive")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError("stages: names must be unique")
        if self.stem is not None:
            st = self.stem
            if st.kernel < 1 or st.kernel % 2 == 0 or st.channels < 1 or st.stride not in (1, 2):
                raise ConfigError("stem: odd kernel, positive channels and stride 1 or 2 required")
        for i, s in enumerate(self.stages):
            where = f"stages[{i}] ({s.name})"
            if s.block not in BLOCK_TYPES:
                raise ConfigError(f"{where}.block: {s.block!r} not in {BLOCK_TYPES}")
            if s.repeat < 1:
                raise ConfigError(f"{where}.repeat: must be >= 1")
            if s.kernel < 1 or s.kernel % 2 == 0:
                raise ConfigError(f"{where}.kernel: must be odd and positive")
            if s.stride not in (1, 2):
                raise ConfigError(f"{where}.stride: must be 1 or 2")
            if s.channels < 1 or s.groups < 1:
                raise ConfigError(f"{where}: channels and groups must be positive")
            if s.pool is not None:
                pk, ps = s.pool
                if pk < 1 or pk % 2 == 0 or ps not in (1, 2):
                    raise ConfigError(f"{where}.pool: odd kernel and stride 1 or 2 required")
                if ps > 1 and s.stride > 1:
                    raise ConfigError(f"{where}: at most one down-sampling op per stage (pool and stride both 2)")
            if s.block == "bottleneck":
                if s.inner < 1 or s.inner % s.groups:
                    raise ConfigError(f"{where}.width: {s.inner} not divisible by groups {s.groups}")
            elif s.channels % s.groups or _block_in(self, s) % s.groups:
                raise ConfigError(f"{where}.groups: input {_block_in(self, s)} and output {s.channels} "
                                  f"channels must be divisible by groups {s.groups}")
            if s.se_ratio is not None and (s.se_ratio < 1 or s.channels // s.se_ratio < 1):
                raise ConfigError(f"{where}.se_ratio: must leave at least one hidden unit")
        n_down = len(downsampling_groups(plan(self)))
        if not 0 <= self.n_dilate <= n_down:
            raise ConfigError(f"n_dilate: {self.n_dilate} exceeds the {n_down} down-sampling op(s) available")
        # extents must stay non-empty in classification mode
        for name, (h, w) in probe_extents(self, "classification").items():
            if h < 1 or w < 1:
                raise ConfigError(f"input {H}x{W} too small: stage {name} has empty output")


# -- the layer plan ---------------------------------------------------------------

@dataclass
class OpSpec:
    name: str  # key of the module in the network, e.g. "layer3.0.conv2"
    kind: str  # "conv" or "pool"
    k: int
    stride: int
    dilation: int = 1
    padding: int = 0
    stage: str = ""
    main: bool = True  # on the main path (shortcut convs are not)
    group: Optional[str] = None  # down-sampling group id


def _same_pad(k: int, dilation: int) -> int:
    return (k - 1) * dilation // 2


def plan(cfg: NetworkConfig) -> list[OpSpec]:
    """Classification-mode spatial ops in forward order (stem, then stages)."""
    ops: list[OpSpec] = []
    if cfg.stem is not None:
        st = cfg.stem
        ops.append(OpSpec("stem.conv", "conv", st.kernel, st.stride, 1, _same_pad(st.kernel, 1), "stem",
                          group="stem" if st.stride > 1 else None))
    for s in cfg.stages:
        if s.pool is not None:
            pk, ps = s.pool
            ops.append(OpSpec(f"{s.name}.pool", "pool", pk, ps, 1, _same_pad(pk, 1), s.name,
                              group=f"{s.name}.pool" if ps > 1 else None))
        for b in range(s.repeat):
            stride = s.stride if b == 0 else 1
            grp = f"{s.name}.{b}" if stride > 1 else None
            pre = f"{s.name}.{b}"
            if s.block == "plain":
                ops.append(OpSpec(f"{pre}.conv", "conv", s.kernel, stride, 1, _same_pad(s.kernel, 1), s.name, group=grp))
                continue
            ops.append(OpSpec(f"{pre}.conv1", "conv", 1, 1, 1, 0, s.name))
            ops.append(OpSpec(f"{pre}.conv2", "conv", s.kernel, stride, 1, _same_pad(s.kernel, 1), s.name, group=grp))
            ops.append(OpSpec(f"{pre}.conv3", "conv", 1, 1, 1, 0, s.name))
            if stride > 1 or b == 0 and _block_in(cfg, s) != s.channels:
                ops.append(OpSpec(f"{pre}.shortcut", "conv", 1, stride, 1, 0, s.name, main=False, group=grp))
    return ops


def _block_in(cfg: NetworkConfig, stage: StageConfig) -> int:
    idx = cfg.stages.index(stage)
    if idx > 0:
        return cfg.stages[idx - 1].channels
    return cfg.stem.channels if cfg.stem is not None else cfg.in_channels


def downsampling_groups(ops: list[OpSpec]) -> list[str]:
    seen: dict[str, None] = {}
    for op in ops:
        if op.group is not None:
            seen.setdefault(op.group)
    return list(seen)


def attention_plan(cfg: NetworkConfig) -> list[OpSpec]:
    """Remove the last ``n_dilate`` down-sampling ops and dilate what follows.

    A removed op keeps the dilation accumulated before it and gets stride 1;
    every later k >= 3 convolution has its dilation multiplied by 2 per
    removal before it. A max pool after a removal cannot be dilated and is
    rejected.
    """
    ops = [replace(op) for op in plan(cfg)]
    groups = downsampling_groups(ops)
    if cfg.n_dilate > len(groups):
        raise ConfigError(f"n_dilate: {cfg.n_dilate} exceeds the {len(groups)} down-sampling op(s) available")
    removed_groups = groups[len(groups) - cfg.n_dilate:] if cfg.n_dilate else []
    seen: list[str] = []
    for op in ops:
        if op.group in removed_groups:
            before = removed_groups.index(op.group)
            op.stride = 1
            if op.group not in seen:
                seen.append(op.group)
        else:
            before = len(seen)
        if op.kind == "pool" and before > 0:
            raise ConfigError(f"{op.name}: max pool after a removed down-sampling op cannot be dilated")
        if op.k >= 3:
            op.dilation = 2 ** before
            op.padding = _same_pad(op.k, op.dilation)
    return ops


def mode_plan(cfg: NetworkConfig, mode: str) -> list[OpSpec]:
    if mode == "classification":
        return plan(cfg)
    if mode == "attention":
        return attention_plan(cfg)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


# -- geometry reports ----------------------------------------------------------------

@dataclass
class ReceptiveField:
    size: int  # receptive field extent in input pixels
    stride: int  # effective stride (jump) in input pixels
    extent: tuple  # output (H, W)


def receptive_field(cfg: NetworkConfig, mode: str = "classification") -> dict[str, ReceptiveField]:
    """Main-path receptive field, jump and output extent at each stage end."""
    main = [op for op in mode_plan(cfg, mode) if op.main]
    r, j = 1, 1
    H, W = cfg.input_size
    out: dict[str, ReceptiveField] = {}
    for i, op in enumerate(main):
        r += (op.k - 1) * op.dilation * j
        j *= op.stride
        H = conv_output_size(H, op.k, op.stride, op.dilation, op.padding)
        W = conv_output_size(W, op.k, op.stride, op.dilation, op.padding)
        last_of_stage = i + 1 == len(main) or main[i + 1].stage != op.stage
        if op.stage != "stem" and last_of_stage:
            out[op.stage] = ReceptiveField(r, j, (H, W))
    return out


def probe_extents(cfg: NetworkConfig, mode: str = "classification") -> dict[str, tuple]:
    return {k: v.extent for k, v in receptive_field(cfg, mode).items()}


def output_factor(cfg: NetworkConfig) -> int:
    """Down-sampling factor of the attention output relative to the input."""
    last = list(receptive_field(cfg, "attention").values())[-1]
    return last.stride


# -- reference configs -------------------------------------------------------------------

def mini_config(n_dilate: int = 1, head_width: int = 32, se_ratio: Optional[int] = 4,
                input_size=(64, 80), groups: int = 2) -> NetworkConfig:
    """Desk-scale network: conv3 stem, three 2-block bottleneck stages (8/16/32 channels)."""
    stages = [
        StageConfig("stage1", "bottleneck", 2, 8, 3, 1, groups, se_ratio),
        StageConfig("stage2", "bottleneck", 2, 16, 3, 2, groups, se_ratio),
        StageConfig("stage3", "bottleneck", 2, 32, 3, 2, groups, se_ratio),
    ]
    cfg = NetworkConfig("mini", stages, tuple(input_size), 1, StemConfig(3, 8, 1), n_dilate, head_width)
    cfg.validate()
    return cfg


def resnext_half_config(n_dilate: int = 2, input_size=(224, 288), in_channels: int = 1) -> NetworkConfig:
    """Half-width SE-ResNeXt-50 with cardinality 16 and SE reduction 16."""
    stages = [
        StageConfig("layer1", "plain", 1, 64, 7, 2),
        StageConfig("layer2", "bottleneck", 3, 128, 3, 1, 16, 16, pool=(3, 2), width=64),
        StageConfig("layer3", "bottleneck", 4, 256, 3, 2, 16, 16, width=128),
        StageConfig("layer4", "bottleneck", 6, 512, 3, 2, 16, 16, width=256),
        StageConfig("layer5", "bottleneck", 3, 1024, 3, 2, 16, 16, width=512),
    ]
    cfg = NetworkConfig("se-resnext50-half", stages, tuple(input_size), in_channels, None, n_dilate, 256)
    cfg.validate()
    return cfg


PRESETS = {"mini": mini_config, "resnext-half": resnext_half_config}


def load_config(source) -> NetworkConfig:
    """Preset name, JSON file path, or dict."""
    if isinstance(source, NetworkConfig):
        return source
    if isinstance(source, dict):
        return NetworkConfig.from_json(source)
    if source in PRESETS:
        return PRESETS[source]()
    try:
        with open(source) as fh:
            return NetworkConfig.from_json(json.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown preset or missing file: {source}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
