"""Train/test splitting protocols and the declarative scene filter."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import LEVEL_RANGES, MINUTES_PER_DAY, WEATHERS, Manifest, level_max

STRATEGIES = ("random", "cross_camera", "cross_location")


@dataclass(frozen=True)
class SplitSpec:
    strategy: str = "random"
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown split strategy {self.strategy!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def _partition(manifest: Manifest, test_mask, tag: str):
    train = [s for s, t in zip(manifest.samples, test_mask) if not t]
    test = [s for s, t in zip(manifest.samples, test_mask) if t]
    return (manifest.with_samples(train, f"{manifest.dataset_name}_{tag}_train"),
            manifest.with_samples(test, f"{manifest.dataset_name}_{tag}_test"))


def split(manifest: Manifest, spec: SplitSpec):
    """Return (train, test) manifests; both keep the input's sample order."""
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    rng = np.random.default_rng(spec.seed)
    if spec.strategy == "random":
        n_train = int(round(spec.train_fraction * n))
        order = rng.permutation(n)
        test_mask = np.ones(n, dtype=bool)
        test_mask[order[:n_train]] = False
        return _partition(manifest, test_mask, "random")

    locs = np.array([s.scene.location_id for s in manifest.samples])
    if spec.strategy == "cross_camera":
        cams = np.array([s.scene.camera.camera_id for s in manifest.samples])
        held = {}
        for loc in sorted(set(locs.tolist())):
            loc_cams = sorted(set(cams[locs == loc].tolist()))
            if len(loc_cams) < 2:
                raise ValueError(f"location {loc} has a single camera; cross_camera needs at least 2")
            held[loc] = loc_cams[int(rng.integers(len(loc_cams)))]
        test_mask = np.array([held[l] == c for l, c in zip(locs.tolist(), cams.tolist())])
        return _partition(manifest, test_mask, "cross_camera")

    uniq = np.array(sorted(set(locs.tolist())))
    if uniq.size < 2:
        raise ValueError("cross_location needs at least 2 locations")
    n_train = min(max(int(round(spec.train_fraction * uniq.size)), 1), uniq.size - 1)
    test_locs = set(rng.permutation(uniq)[n_train:].tolist())
    test_mask = np.array([l in test_locs for l in locs.tolist()])
    return _partition(manifest, test_mask, "cross_location")


@dataclass(frozen=True)
class FilterSpec:
    levels: frozenset = frozenset(range(len(LEVEL_RANGES)))
    time_window: tuple = (0, MINUTES_PER_DAY - 1)
    weathers: frozenset = frozenset(range(len(WEATHERS)))
    count_range: tuple = (0, None)  # None = unbounded above
    ratio_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "levels", frozenset(int(v) for v in self.levels))
        object.__setattr__(self, "weathers", frozenset(int(v) for v in self.weathers))
        object.__setattr__(self, "time_window", tuple(int(v) for v in self.time_window))
        lo, hi = self.count_range
        object.__setattr__(self, "count_range", (int(lo), None if hi is None or hi == math.inf else int(hi)))
        object.__setattr__(self, "ratio_range", tuple(float(v) for v in self.ratio_range))
        t0, t1 = self.time_window
        if not (0 <= t0 < MINUTES_PER_DAY and 0 <= t1 < MINUTES_PER_DAY):
            raise ValueError("time window endpoints must lie in [0, 1439]")
        lo, hi = self.count_range
        if lo < 0 or (hi is not None and lo > hi):
            raise ValueError("count range must satisfy 0 <= lo <= hi")
        r0, r1 = self.ratio_range
        if not 0.0 <= r0 <= r1 <= 1.0:
            raise ValueError("ratio range must satisfy 0 <= r_lo <= r_hi <= 1")

    def to_json(self) -> dict:
        return {
            "levels": sorted(self.levels),
            "time_window": list(self.time_window),
            "weathers": sorted(self.weathers),
            "count_range": list(self.count_range),
            "ratio_range": list(self.ratio_range),
        }

    @classmethod
    def from_json(cls, obj) -> "FilterSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        extra = set(obj) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown filter fields {sorted(extra)}")
        return cls(**obj)

    def time_ok(self, minutes: int) -> bool:
        t0, t1 = self.time_window
        if t0 <= t1:
            return t0 <= minutes <= t1
        return minutes >= t0 or minutes <= t1  # wraps past midnight

    def accepts(self, sample) -> bool:
        lvl = sample.scene.level
        lo, hi = self.count_range
        top = level_max(lvl)
        r0, r1 = self.ratio_range
        return (
            lvl in self.levels
            and self.time_ok(sample.time_minutes)
            and sample.weather in self.weathers
            and lo <= sample.count and (hi is None or sample.count <= hi)
            and r0 * top <= sample.count <= r1 * top
        )


def _hm(h, m):
    return 60 * h + m


# Scene-regularization rows for the five target datasets.
PRESETS = {
    "shta": FilterSpec({4, 5, 6, 7, 8}, (_hm(6, 0), _hm(19, 59)), {0, 1, 3, 5, 6}, (25, 4000), (0.5, 1.0)),
    "shtb": FilterSpec({1, 2, 3, 4, 5}, (_hm(6, 0), _hm(19, 59)), {0, 1, 5, 6}, (10, 600), (0.3, 1.0)),
    "ucf_cc_50": FilterSpec({5, 6, 7, 8}, (_hm(8, 0), _hm(17, 59)), {0, 1, 5, 6}, (400, 4000), (0.6, 1.0)),
    "ucf_qnrf": FilterSpec({4, 5, 6, 7, 8}, (_hm(5, 0), _hm(20, 59)), {0, 1, 5, 6}, (400, 4000), (0.6, 1.0)),
    "worldexpo10": FilterSpec({2, 3, 4, 5, 6}, (_hm(6, 0), _hm(18, 59)), {0, 1, 5, 6}, (0, 1000), (0.0, 1.0)),
    "all": FilterSpec(),
}


def get_preset(name: str) -> FilterSpec:
    try:
        return PRESETS[name.lower().replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown filter preset {name!r}; choose from {sorted(PRESETS)}") from None


def presets_to_json() -> str:
    return json.dumps({k: v.to_json() for k, v in PRESETS.items()}, indent=1, sort_keys=True)


def presets_from_json(text: str) -> dict:
    return {k: FilterSpec.from_json(v) for k, v in json.loads(text).items()}


def apply_scene_filter(manifest: Manifest, spec: FilterSpec) -> Manifest:
    kept = [s for s in manifest.samples if spec.accepts(s)]
    return manifest.with_samples(kept)
