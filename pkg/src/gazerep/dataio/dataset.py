"""On-disk dataset format.

A dataset directory holds ``manifest.jsonl`` (one record per frame),
``classes.json`` (ordered class names, background last) and 8-bit PGM frames.
Gaze in the manifest is normalized to [0, 1]^2; loaded samples carry gaze in
pixels (x rightward, y downward).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pgm import PGMError, read_pgm, write_pgm


class DatasetError(ValueError):
    pass


@dataclass
class FrameRecord:
    image: str
    scan: str
    frame: int
    gaze: list = field(default_factory=list)  # normalized (x, y) pairs
    label: str | None = None

    def to_json(self) -> dict:
        return {"image": self.image, "scan": self.scan, "frame": self.frame,
                "gaze": [[float(x), float(y)] for x, y in self.gaze], "label": self.label}


@dataclass
class FrameSample:
    scan: str
    frame: int
    image: np.ndarray  # [1, H, W] float32
    gaze: np.ndarray | None  # [N_G, 2] pixels
    label: str | None = None

    @property
    def height(self) -> int:
        return self.image.shape[-2]

    @property
    def width(self) -> int:
        return self.image.shape[-1]


class Dataset:
    """Manifest records plus lazily loaded (and cached) frames."""

    def __init__(self, root, records: Sequence[FrameRecord], classes: Sequence[str], cache: bool = True):
        self.root = Path(root)
        self.records = list(records)
        self.classes = list(classes)
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    @property
    def background(self) -> str:
        return self.classes[-1]

    @property
    def foreground(self) -> list[str]:
        return self.classes[:-1]

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, records: Iterable[FrameRecord]) -> "Dataset":
        out = Dataset(self.root, list(records), self.classes, cache=self._cache is not None)
        out._cache = self._cache  # share decoded frames
        return out

    def label_index(self, label: str) -> int:
        return self.classes.index(label)

    def raw_image(self, rec: FrameRecord) -> np.ndarray:
        if self._cache is not None and rec.image in self._cache:
            return self._cache[rec.image]
        path = self.root / rec.image
        try:
            img = read_pgm(path).astype(np.float32) / np.float32(255.0)
        except FileNotFoundError as exc:
            raise DatasetError(f"missing frame file {path}") from exc
        except PGMError as exc:
            raise DatasetError(str(exc)) from exc
        img = img[None]
        if self._cache is not None:
            self._cache[rec.image] = img
        return img

    def sample(self, i: int) -> FrameSample:
        rec = self.records[i]
        img = self.raw_image(rec)
        H, W = img.shape[-2:]
        gaze = None
        if rec.gaze:
            gaze = np.asarray(rec.gaze, dtype=np.float64).reshape(-1, 2) * np.array([W, H], dtype=np.float64)
        return FrameSample(rec.scan, rec.frame, img, gaze, rec.label)

    def __getitem__(self, i: int) -> FrameSample:
        return self.sample(i)


def _parse_record(obj, lineno: int, classes: Sequence[str]) -> FrameRecord:
    if not isinstance(obj, dict):
        raise DatasetError(f"manifest line {lineno}: expected an object")
    for key in ("image", "scan", "frame"):
        if key not in obj:
            raise DatasetError(f"manifest line {lineno}: missing field '{key}'")
    if not isinstance(obj["image"], str) or not isinstance(obj["scan"], str):
        raise DatasetError(f"manifest line {lineno}: 'image' and 'scan' must be strings")
    if not isinstance(obj["frame"], int) or isinstance(obj["frame"], bool):
        raise DatasetError(f"manifest line {lineno}: 'frame' must be an integer")
    gaze = obj.get("gaze") or []
    if not isinstance(gaze, list):
        raise DatasetError(f"manifest line {lineno}: 'gaze' must be a list of [x, y] pairs")
    pts = []
    for p in gaze:
        if not (isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p)):
            raise DatasetError(f"manifest line {lineno}: malformed gaze point {p!r}")
        x, y = float(p[0]), float(p[1])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise DatasetError(f"manifest line {lineno}: gaze point {p!r} outside [0,1]^2")
        pts.append((x, y))
    label = obj.get("label")
    if label is not None and label not in classes:
        raise DatasetError(f"manifest line {lineno}: label {label!r} not in classes.json")
    return FrameRecord(obj["image"], obj["scan"], obj["frame"], pts, label)


def load_dataset(directory, check_files: bool = True) -> Dataset:
    root = Path(directory)
    try:
        classes = json.loads((root / "classes.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{root}: missing classes.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}/classes.json: {exc}") from exc
    if not (isinstance(classes, list) and len(classes) >= 2 and all(isinstance(c, str) for c in classes)):
        raise DatasetError(f"{root}/classes.json must list at least two class names")
    if len(set(classes)) != len(classes):
        raise DatasetError(f"{root}/classes.json has duplicate class names")
    records = []
    try:
        lines = (root / "manifest.jsonl").read_text().splitlines()
    except FileNotFoundError as exc:
        raise DatasetError(f"{root}: missing manifest.jsonl") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest line {lineno}: {exc.msg}") from exc
        rec = _parse_record(obj, lineno, classes)
        if check_files and not (root / rec.image).is_file():
            raise DatasetError(f"manifest line {lineno}: missing frame file {rec.image}")
        records.append(rec)
    return Dataset(root, records, classes)


def write_dataset(directory, records: Sequence[FrameRecord], classes: Sequence[str], images=None) -> Path:
    """Write manifest and class list; ``images`` maps relpath -> [H, W] array in [0, 1]."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    if images:
        for rel, img in images.items():
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            write_pgm(path, img)
    (root / "classes.json").write_text(json.dumps(list(classes)) + "\n")
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    return root
