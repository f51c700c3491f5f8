"""Run configuration and the dataset splits shared by the CLI commands."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attnmodel.config import ConfigError, NetworkConfig, load_config
from .dataio.dataset import Dataset
from .dataio.preprocess import filter_valid, split_by_scan, temporal_subsample
from .numcore.rng import rng_stream
from .trainer import PRESETS as TRAIN_PRESETS
from .trainer import TrainConfig


@dataclass
class RunConfig:
    """Everything a command needs, resolved before any work starts."""
    network: object = "mini"  # preset name or inline NetworkConfig dict
    train: dict = field(default_factory=dict)  # TrainConfig fields (preset merged in)
    seed: int = 0
    split_seed: int = 0  # scan-level splits are fixed across model seeds
    stride: int = 8  # temporal subsampling for attention data
    split: list = field(default_factory=lambda: [2, 1])  # train/val scan fractions for attention data
    labeled_split: list = field(default_factory=lambda: [3, 1, 1])  # train/val/test for labeled data
    train_per_class: int | None = None  # cap on labeled training frames per class
    probe: dict = field(default_factory=dict)  # layers, max_iter, tol

    def network_config(self) -> NetworkConfig:
        return load_config(self.network)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_json({**self.train, "seed": self.seed})

    def to_json(self) -> dict:
        d = asdict(self)
        if isinstance(self.network, NetworkConfig):
            d["network"] = self.network.to_json()
        return d


# --config shorthands: network preset plus a training preset per task
RUN_PRESETS = {
    "mini": ("mini", "mini"),
    "paper": ("resnext-half", "paper"),
}


def _train_preset(prefix: str, task: str) -> dict:
    name = f"{prefix}-{'finetune' if task == 'classify' else task}"
    return TRAIN_PRESETS[name].to_json()


def resolve_run_config(source, task: str, overrides: dict | None = None) -> RunConfig:
    """Merge a preset name or JSON file with flag overrides (flags win).

    A training preset name ("paper-saliency", ...) is also accepted and pairs
    with the matching network.
    """
    base: dict = {}
    if source is None:
        source = "mini"
    if isinstance(source, dict):
        base = dict(source)
    elif source in RUN_PRESETS:
        net, prefix = RUN_PRESETS[source]
        base = {"network": net, "train": _train_preset(prefix, task)}
    elif source in TRAIN_PRESETS:
        base = {"network": "resnext-half" if source.startswith("paper") else "mini",
                "train": TRAIN_PRESETS[source].to_json()}
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"--config: {source!r} is neither a preset ({', '.join(sorted(RUN_PRESETS))}) "
                              f"nor an existing file")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: {path} is not valid JSON: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = set(base) - known
    if unknown:
        raise ConfigError(f"unknown run config key(s): {', '.join(sorted(unknown))}")
    train = base.get("train", {})
    if isinstance(train, str):
        if train not in TRAIN_PRESETS:
            raise ConfigError(f"unknown training preset {train!r}")
        train = TRAIN_PRESETS[train].to_json()
    elif not train:
        prefix = "paper" if base.get("network") == "resnext-half" else "mini"
        train = _train_preset(prefix, task)
    train = {**train, "task": task}
    overrides = dict(overrides or {})
    for key in ("lr", "epochs", "samples_per_epoch", "batch_size", "sigma", "freeze_backbone"):
        if overrides.get(key) is not None:
            train[key] = overrides.pop(key)
    if overrides.get("epochs_decay") is not None:
        train["decay_epochs"] = overrides.pop("epochs_decay")
    rc = RunConfig(**{**base, "train": train})
    for key, val in overrides.items():
        if val is not None:
            setattr(rc, key, val)
    # resolve eagerly so every error surfaces before work starts
    rc.network_config()
    rc.train_config()
    return rc


def write_run_config(rc: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.json"
    path.write_text(json.dumps(rc.to_json(), indent=2, sort_keys=True) + "\n")
    return path


# -- splits ----------------------------------------------------------------------------

def attention_splits(ds: Dataset, rc: RunConfig) -> tuple[Dataset, Dataset]:
    """Temporal subsampling, gaze filtering, then a scan-level train/val split."""
    recs, _ = filter_valid(temporal_subsample(ds.records, rc.stride))
    if not recs:
        raise ValueError("no frames with gaze after subsampling")
    tr, va = split_by_scan(recs, rc.split, rc.split_seed)
    if not tr or not va:
        raise ValueError("degenerate attention split: a split has no scans")
    return ds.subset(tr), ds.subset(va)


def scan_classes(ds: Dataset) -> dict[str, str]:
    """The foreground class of each scan (background when a scan has none)."""
    out: dict[str, str] = {}
    for r in ds.records:
        if r.label is not None and r.label != ds.background:
            out[r.scan] = r.label
    for r in ds.records:
        out.setdefault(r.scan, ds.background)
    return out


def labeled_splits(ds: Dataset, rc: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Scan-level train/val/test split of labeled frames, stratified by each scan's class."""
    labeled = [r for r in ds.records if r.label is not None]
    if not labeled:
        raise ValueError("dataset has no labeled frames")
    parts = split_by_scan(labeled, rc.labeled_split, rc.split_seed, stratify=scan_classes(ds))
    if len(parts) != 3 or not all(parts):
        raise ValueError("degenerate labeled split: need three non-empty scan groups")
    tr, va, te = parts
    if rc.train_per_class is not None:
        tr = cap_per_class(tr, rc.train_per_class, rc.split_seed)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def cap_per_class(records, n: int, seed: int) -> list:
    """Keep at most ``n`` records per label, chosen reproducibly, in original order."""
    by: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by.setdefault(r.label, []).append(i)
    keep = set()
    for k, label in enumerate(sorted(by)):
        idx = by[label]
        pick = rng_stream(seed, 0xCA9, k).permutation(len(idx))[:n]
        keep.update(idx[j] for j in pick)
    return [r for i, r in enumerate(records) if i in keep]


def class_counts(records, classes) -> dict[str, int]:
    counts = {c: 0 for c in classes}
    for r in records:
        if r.label is not None:
            counts[r.label] += 1
    return counts


def describe_split(name: str, ds: Dataset) -> str:
    scans = len({r.scan for r in ds.records})
    return f"{name}: {len(ds)} frames from {scans} scans"


__all__ = ["RunConfig", "RUN_PRESETS", "resolve_run_config", "write_run_config", "attention_splits",
           "labeled_splits", "scan_classes", "cap_per_class", "class_counts", "describe_split"]
