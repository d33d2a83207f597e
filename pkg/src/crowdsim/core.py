"""Data model shared by every stage: scenes, samples, manifests.

Coordinates use a top-left origin with y pointing down, in pixels.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels

# capacity ranges per level code, inclusive
LEVEL_RANGES = (
    (0, 10), (0, 25), (0, 50), (0, 100), (0, 300),
    (0, 600), (0, 1000), (0, 2000), (0, 4000),
)
WEATHERS = ("clear", "clouds", "rain", "foggy", "thunder", "overcast", "extra sunny")
MINUTES_PER_DAY = 1440
CAMERAS_PER_LOCATION = 4


class ManifestError(ValueError):
    """Raised when a manifest file cannot be parsed."""


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


def level_max(level: int) -> int:
    return LEVEL_RANGES[level][1]


@dataclass(frozen=True)
class HeadPoint:
    x: float
    y: float


@dataclass(frozen=True)
class CameraMeta:
    camera_id: int
    position: Optional[tuple] = None
    height: Optional[float] = None
    pitch: Optional[float] = None
    yaw: Optional[float] = None
    fov: Optional[float] = None


def polygon_area(roi: Sequence[Sequence[float]]) -> float:
    """Shoelace area, positive regardless of winding."""
    pts = np.asarray(roi, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _check_polygon(roi) -> np.ndarray:
    pts = np.asarray(roi, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValidationError("polygon needs at least 3 (x, y) vertices")
    if polygon_area(pts) <= 0.0:
        raise ValidationError("polygon has zero area")
    return pts


def point_in_roi(p: HeadPoint, roi) -> bool:
    """Even-odd membership test; points on the boundary count as inside."""
    pts = _check_polygon(roi)
    res = kernels.points_in_polygon([p.x], [p.y], pts[:, 0], pts[:, 1])
    return bool(res[0])


def points_in_roi(xs, ys, roi) -> np.ndarray:
    pts = _check_polygon(roi)
    return kernels.points_in_polygon(xs, ys, pts[:, 0], pts[:, 1]).astype(bool)


@dataclass(frozen=True)
class SceneMeta:
    location_id: int
    camera: CameraMeta
    roi: tuple
    level: int

    def validate(self) -> None:
        if not 0 <= self.level < len(LEVEL_RANGES):
            raise ValidationError(f"level {self.level} outside [0, 8]")
        _check_polygon(self.roi)

    @property
    def capacity(self) -> tuple:
        return LEVEL_RANGES[self.level]


@dataclass(frozen=True)
class Sample:
    image_path: str
    width: int
    height: int
    heads: tuple
    count: int
    time_minutes: int
    weather: int
    scene: SceneMeta

    @classmethod
    def build(cls, image_path, width, height, heads, time_minutes, weather, scene):
        heads = tuple(h if isinstance(h, HeadPoint) else HeadPoint(float(h[0]), float(h[1])) for h in heads)
        return cls(image_path, int(width), int(height), heads, len(heads), int(time_minutes), int(weather), scene)

    def head_array(self) -> np.ndarray:
        return np.array([(h.x, h.y) for h in self.heads], dtype=np.float64).reshape(-1, 2)

    def validate(self) -> None:
        """Raise ValidationError naming the first broken invariant."""
        try:
            self.scene.validate()
        except ValidationError as exc:
            raise ValidationError(f"scene: {exc}") from None
        if self.count != len(self.heads):
            raise ValidationError(f"count {self.count} != number of heads {len(self.heads)}")
        lo, hi = self.scene.capacity
        if not lo <= self.count <= hi:
            raise ValidationError(f"count {self.count} outside level {self.scene.level} range {lo}-{hi}")
        if not 0 <= self.time_minutes < MINUTES_PER_DAY:
            raise ValidationError(f"time_minutes {self.time_minutes} outside [0, 1439]")
        if not 0 <= self.weather < len(WEATHERS):
            raise ValidationError(f"weather {self.weather} outside [0, 6]")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")
        if not self.heads:
            return
        arr = self.head_array()
        bad = np.flatnonzero(
            (arr[:, 0] < 0) | (arr[:, 0] >= self.width) | (arr[:, 1] < 0) | (arr[:, 1] >= self.height)
        )
        if bad.size:
            h = self.heads[bad[0]]
            raise ValidationError(f"head ({h.x}, {h.y}) outside image bounds")
        inside = points_in_roi(arr[:, 0], arr[:, 1], self.scene.roi)
        if not inside.all():
            h = self.heads[int(np.flatnonzero(~inside)[0])]
            raise ValidationError(f"head ({h.x}, {h.y}) outside scene ROI")


@dataclass(frozen=True)
class Manifest:
    samples: tuple
    dataset_name: str
    generation_seed: int
    # directory image paths are relative to; not serialized
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def image_file(self, sample: Sample) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / sample.image_path

    def with_samples(self, samples, dataset_name=None) -> "Manifest":
        return replace(self, samples=tuple(samples), dataset_name=dataset_name or self.dataset_name)

    def validate(self) -> None:
        seen = set()
        for i, s in enumerate(self.samples):
            if s.image_path in seen:
                raise ValidationError(f"sample {i} ({s.image_path}): duplicate image path")
            seen.add(s.image_path)
            try:
                s.validate()
            except ValidationError as exc:
                raise ValidationError(f"sample {i} ({s.image_path}): {exc}") from None


def _sample_to_json(s: Sample, image: str) -> dict:
    return {
        "image": image,
        "width": s.width,
        "height": s.height,
        "heads": [[h.x, h.y] for h in s.heads],
        "count": s.count,
        "time_minutes": s.time_minutes,
        "weather": s.weather,
        "location_id": s.scene.location_id,
        "camera_id": s.scene.camera.camera_id,
        "level": s.scene.level,
        "roi": [[float(x), float(y)] for x, y in s.scene.roi],
    }


_REQUIRED = ("image", "width", "height", "heads", "time_minutes", "weather",
             "location_id", "camera_id", "level", "roi")


def _sample_from_json(i: int, obj: dict) -> Sample:
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ManifestError(f"sample {i}: missing keys {missing}")
    try:
        heads = tuple(HeadPoint(float(x), float(y)) for x, y in obj["heads"])
        roi = tuple((float(x), float(y)) for x, y in obj["roi"])
        scene = SceneMeta(int(obj["location_id"]), CameraMeta(int(obj["camera_id"])), roi, int(obj["level"]))
        count = int(obj.get("count", len(heads)))
        return Sample(str(obj["image"]), int(obj["width"]), int(obj["height"]), heads, count,
                      int(obj["time_minutes"]), int(obj["weather"]), scene)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"sample {i}: {exc}") from None


def manifest_to_json(manifest: Manifest, relative_to: Optional[Path] = None) -> str:
    samples = []
    for s in manifest.samples:
        image = s.image_path
        if relative_to is not None and manifest.root is not None:
            src = Path(os.path.abspath(manifest.root / image))
            image = Path(os.path.relpath(src, os.path.abspath(relative_to))).as_posix()
        samples.append(_sample_to_json(s, image))
    doc = {
        "dataset_name": manifest.dataset_name,
        "generation_seed": manifest.generation_seed,
        "samples": samples,
    }
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


def save_manifest(manifest: Manifest, path) -> Path:
    """Write the manifest; image paths are rewritten relative to the new location."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_to_json(manifest, relative_to=path.parent), encoding="utf-8")
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"dataset_name", "generation_seed", "samples"}:
        raise ManifestError(f"{path}: top-level keys must be dataset_name, generation_seed, samples")
    if not isinstance(doc["samples"], list):
        raise ManifestError(f"{path}: samples must be a list")
    samples = tuple(_sample_from_json(i, obj) for i, obj in enumerate(doc["samples"]))
    m = Manifest(samples, str(doc["dataset_name"]), int(doc["generation_seed"]), root=path.parent)
    m.validate()
    return m


def manifest_hash(path) -> str:
    """Git blob hash of a manifest file's bytes."""
    import hashlib

    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
