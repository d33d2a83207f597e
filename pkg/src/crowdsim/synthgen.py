"""Procedural crowd scenes with automatic head labels.

Persons are drawn as a head disk on top of a body ellipse. Glyphs are
painted back to front by head row, and a head is dropped from the labels
when a person painted later covers its head pixel.
"""
from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from shapely.geometry import Polygon, box

from . import kernels
from .core import (CAMERAS_PER_LOCATION, LEVEL_RANGES, CameraMeta, HeadPoint, Manifest, Sample,
                   SceneMeta, points_in_roi, save_manifest)

log = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = (270, 480)  # (height, width)
REGION_CAP = 255
# head radius in pixels at the reference height of 270 rows, per level
LEVEL_HEAD_RADIUS = (6.0, 5.0, 4.5, 4.0, 3.0, 2.5, 2.0, 1.6, 1.3)
MIN_HEAD_RADIUS = 1.0
WEATHER_WEIGHTS = (0.26, 0.2, 0.09, 0.07, 0.06, 0.16, 0.16)
DAYTIME = (360, 1199)
DAYTIME_SHARE = 0.7


def default_images_per_level() -> dict:
    return {lvl: (30, 40, 50)[lvl // 3] for lvl in range(len(LEVEL_RANGES))}


@dataclass
class GeneratorSpec:
    n_locations: int = 100
    cameras_per_location: int = CAMERAS_PER_LOCATION
    images_per_level: dict = field(default_factory=default_images_per_level)
    image_size: tuple = DEFAULT_IMAGE_SIZE
    person_glyph_palette: int = 24
    seed: int = 0
    levels: Optional[tuple] = None  # restrict scene levels; None = all nine
    weathers: Optional[tuple] = None  # restrict weather codes
    time_window: Optional[tuple] = None  # restrict capture minutes, inclusive
    person_scale: float = 1.0
    occlusion: str = "center"
    dataset_name: str = "synthetic"


class Mask(NamedTuple):
    """Occupancy of one person: a boolean patch anchored at (top, left)."""
    top: int
    left: int
    patch: np.ndarray

    def full(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        h, w = self.patch.shape
        out[self.top:self.top + h, self.left:self.left + w] = self.patch
        return out

    def covers(self, row: int, col: int) -> bool:
        r, c = row - self.top, col - self.left
        return 0 <= r < self.patch.shape[0] and 0 <= c < self.patch.shape[1] and bool(self.patch[r, c])


class Placement(NamedTuple):
    layer: np.ndarray  # (H, W, 4) premultiplied RGBA
    masks: list
    heads: list  # in z-order, back to front
    glyphs: np.ndarray  # (n, 7) head x, y, r, body cx, cy, semi-axes
    colors: np.ndarray  # (n, 2, 3) body and head colour


@dataclass(frozen=True)
class RegionPartition:
    regions: tuple
    per_region_cap: int = REGION_CAP

    def validate(self) -> None:
        polys = [Polygon(r) for r in self.regions]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                if polys[i].intersection(polys[j]).area > 1e-9:
                    raise ValueError(f"regions {i} and {j} overlap")


def build_scene(location_id: int, camera_id: int, rng, image_size=DEFAULT_IMAGE_SIZE,
                levels: Optional[Sequence[int]] = None) -> SceneMeta:
    """Camera parameters, a perspective ROI quadrilateral and a capacity level."""
    if location_id < 0 or camera_id < 0:
        raise ValueError("ids must be nonnegative")
    h, w = image_size
    cam = CameraMeta(
        camera_id=camera_id,
        position=tuple(round(float(v), 3) for v in rng.uniform((-1000, -1000, 0), (1000, 1000, 60))),
        height=round(float(rng.uniform(3.0, 30.0)), 3),
        pitch=round(float(rng.uniform(-60.0, -10.0)), 3),
        yaw=round(float(rng.uniform(0.0, 360.0)), 3),
        fov=round(float(rng.uniform(40.0, 90.0)), 3),
    )
    choices = tuple(levels) if levels is not None else tuple(range(len(LEVEL_RANGES)))
    level = int(choices[int(rng.integers(len(choices)))])
    y_top = rng.uniform(0.2, 0.45) * (h - 1)
    y_bot = rng.uniform(0.88, 1.0) * (h - 1)
    xs = (rng.uniform(0.1, 0.35), rng.uniform(0.65, 0.9), rng.uniform(0.85, 1.0), rng.uniform(0.0, 0.15))
    roi = (
        (round(xs[0] * (w - 1), 1), round(y_top, 1)),
        (round(xs[1] * (w - 1), 1), round(y_top, 1)),
        (round(xs[2] * (w - 1), 1), round(y_bot, 1)),
        (round(xs[3] * (w - 1), 1), round(y_bot, 1)),
    )
    return SceneMeta(location_id, cam, roi, level)


def palette_colors(index: int, palette: int) -> np.ndarray:
    """Body and head colour for one appearance variant."""
    hue = (index * 0.61803398875) % 1.0
    sat = 0.45 + 0.4 * ((index * 7) % 5) / 4.0
    val = 0.35 + 0.55 * ((index * 3) % 4) / 3.0
    body = colorsys.hsv_to_rgb(hue, sat, val)
    tones = ((0.96, 0.80, 0.69), (0.87, 0.67, 0.52), (0.63, 0.45, 0.33), (0.40, 0.27, 0.18))
    head = tones[index % 4]
    return np.array([body, head], dtype=np.float64)


def head_radius(scene: SceneMeta, y: float, image_size, person_scale: float = 1.0) -> float:
    h = image_size[0]
    base = LEVEL_HEAD_RADIUS[scene.level] * (h / DEFAULT_IMAGE_SIZE[0]) * person_scale
    return max(MIN_HEAD_RADIUS, base * (0.5 + y / h))


def make_glyph(x: float, y: float, r: float) -> np.ndarray:
    return np.array([x, y, r, x, y + 2.6 * r, 1.2 * r, 2.0 * r], dtype=np.float64)


def glyph_mask(glyph, image_size) -> Mask:
    h, w = image_size
    i0, i1, j0, j1 = kernels.glyph_bbox(glyph, h, w)
    if i1 < i0 or j1 < j0:
        return Mask(0, 0, np.zeros((0, 0), dtype=bool))
    sd_head, sd_body = kernels.glyph_distances(glyph, i0, i1, j0, j1)
    return Mask(i0, j0, np.minimum(sd_head, sd_body) <= 0.0)


def _sample_points(rng, n: int, polys, image_size):
    """Uniform rejection sampling inside every polygon in ``polys``."""
    h, w = image_size
    pts = np.asarray(polys[0], dtype=np.float64)
    lo = np.maximum(pts.min(axis=0), 0.0)
    hi = np.minimum(pts.max(axis=0), (w - 1e-6, h - 1e-6))
    out = np.empty((0, 2))
    while out.shape[0] < n:
        need = n - out.shape[0]
        cand = np.round(rng.uniform(lo, hi, size=(max(2 * need, 16), 2)), 2)
        ok = (cand[:, 0] < w) & (cand[:, 1] < h)
        for poly in polys:
            ok &= points_in_roi(cand[:, 0], cand[:, 1], poly)
        out = np.vstack([out, cand[ok][:need]])
    return out


def place_persons(scene: SceneMeta, n: int, rng, image_size=DEFAULT_IMAGE_SIZE, region=None,
                  palette: int = 24, person_scale: float = 1.0, cap: int = REGION_CAP) -> Placement:
    """One placement pass of at most ``cap`` persons inside the ROI (and ``region``)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n > cap:
        raise ValueError(f"{n} persons exceed the per-pass cap of {cap}; use synthesize_congested")
    h, w = image_size
    polys = [scene.roi] if region is None else [region, scene.roi]
    if n == 0:
        return Placement(np.zeros((h, w, 4)), [], [], np.zeros((0, 7)), np.zeros((0, 2, 3)))
    xy = _sample_points(rng, n, polys, image_size)
    variants = rng.integers(palette, size=n)
    xy = xy[np.argsort(xy[:, 1], kind="stable")]
    glyphs = np.stack([make_glyph(x, y, head_radius(scene, y, image_size, person_scale)) for x, y in xy])
    colors = np.stack([palette_colors(int(v), palette) for v in variants])
    layer = kernels.render_glyphs(glyphs, colors, h, w)
    masks = [glyph_mask(g, image_size) for g in glyphs]
    heads = [HeadPoint(float(x), float(y)) for x, y in xy]
    return Placement(layer, masks, heads, glyphs, colors)


def remove_occluded_heads(heads, masks, z_order, mode: str = "center", head_radii=None,
                          area_fraction: float = 0.5, shape=None):
    """Keep heads not covered by any person later in ``z_order``.

    ``z_order[k]`` is the index of the k-th person painted. In ``center``
    mode a head is occluded when its head pixel is covered; in ``area`` mode
    when at least ``area_fraction`` of its head disk is.
    """
    n = len(heads)
    if n == 0:
        return []
    if len(masks) != n or sorted(z_order) != list(range(n)):
        raise ValueError("need one mask per head and a permutation z_order")
    if shape is None:
        shape = (max(m.top + m.patch.shape[0] for m in masks), max(m.left + m.patch.shape[1] for m in masks))
    rank = np.empty(n, dtype=np.int64)
    rank[np.asarray(z_order)] = np.arange(n)
    top = np.full(shape, -1, dtype=np.int64)
    for k in z_order:
        m = masks[k]
        ph, pw = m.patch.shape
        view = top[m.top:m.top + ph, m.left:m.left + pw]
        view[m.patch[:view.shape[0], :view.shape[1]]] = rank[k]
    kept = []
    for i, hd in enumerate(heads):
        if mode == "center":
            r, c = int(math.floor(hd.y)), int(math.floor(hd.x))
            inside = 0 <= r < shape[0] and 0 <= c < shape[1]
            occluded = inside and top[r, c] > rank[i]
        elif mode == "area":
            if head_radii is None:
                raise ValueError("area mode needs head_radii")
            rad = head_radii[i]
            i0, i1 = max(int(hd.y - rad), 0), min(int(hd.y + rad) + 1, shape[0])
            j0, j1 = max(int(hd.x - rad), 0), min(int(hd.x + rad) + 1, shape[1])
            cy = np.arange(i0, i1)[:, None] + 0.5
            cx = np.arange(j0, j1)[None, :] + 0.5
            disk = (cy - hd.y) ** 2 + (cx - hd.x) ** 2 <= rad * rad
            covered = (top[i0:i1, j0:j1] > rank[i]) & disk
            occluded = disk.any() and covered.sum() / disk.sum() >= area_fraction
        else:
            raise ValueError(f"unknown occlusion mode {mode!r}")
        if not occluded:
            kept.append(hd)
    return kept


def scene_background(scene: SceneMeta, image_size) -> np.ndarray:
    """Deterministic per-scene backdrop in [0, 1]: sky/wall above, ground inside the ROI."""
    h, w = image_size
    rng = np.random.default_rng([scene.location_id, scene.camera.camera_id, 7919])
    top, ground, outside = rng.uniform(0.25, 0.85, size=(3, 3))
    rows = np.linspace(0.0, 1.0, h)[:, None, None]
    img = top * (1 - rows) + outside * rows
    img = np.broadcast_to(img, (h, w, 3)).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    inside = points_in_roi(xx.ravel() + 0.5, yy.ravel() + 0.5, scene.roi).reshape(h, w)
    img[inside] = ground
    tex = gaussian_filter(rng.normal(0.0, 1.0, size=(h, w)), 3.0)
    tex /= max(np.abs(tex).max(), 1e-9)
    img += 0.08 * tex[..., None]
    return np.clip(img, 0.0, 1.0)


def equal_area_bands(roi, n_regions: int):
    """Split the ROI into ``n_regions`` horizontal bands of equal area."""
    poly = Polygon(roi)
    if n_regions <= 1:
        return [tuple(roi)]
    minx, miny, maxx, maxy = poly.bounds
    target = poly.area / n_regions

    def area_above(y):
        return poly.intersection(box(minx - 1, miny - 1, maxx + 1, y)).area

    cuts = [miny]
    for k in range(1, n_regions):
        lo, hi = cuts[-1], maxy
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            if area_above(mid) < k * target:
                lo = mid
            else:
                hi = mid
        cuts.append(0.5 * (lo + hi))
    cuts.append(maxy)
    bands = []
    for y0, y1 in zip(cuts[:-1], cuts[1:]):
        piece = poly.intersection(box(minx - 1, y0, maxx + 1, y1))
        bands.append(tuple(piece.exterior.coords)[:-1])
    return bands


def synthesize_congested(scene: SceneMeta, partition: RegionPartition, counts, rng,
                         image_size=DEFAULT_IMAGE_SIZE, background=None, palette: int = 24,
                         person_scale: float = 1.0, occlusion: str = "center"):
    """Fill regions pass by pass, composite everything, drop occluded heads.

    Returns the RGB image in [0, 1] and the visible heads.
    """
    if len(counts) != len(partition.regions):
        raise ValueError("one count per region required")
    for c in counts:
        if c > partition.per_region_cap:
            raise ValueError(f"region count {c} exceeds cap {partition.per_region_cap}")
    partition.validate()
    h, w = image_size
    passes = [place_persons(scene, int(c), rng, image_size, region, palette, person_scale,
                            cap=partition.per_region_cap)
              for region, c in zip(partition.regions, counts)]
    heads = [hd for p in passes for hd in p.heads]
    masks = [m for p in passes for m in p.masks]
    glyphs = np.concatenate([p.glyphs for p in passes]) if passes else np.zeros((0, 7))
    colors = np.concatenate([p.colors for p in passes]) if passes else np.zeros((0, 2, 3))
    z_order = np.argsort(np.array([hd.y for hd in heads]), kind="stable").tolist()
    if len(passes) == 1:
        layer = passes[0].layer
    else:
        layer = kernels.render_glyphs(glyphs[z_order], colors[z_order], h, w)
    bg = scene_background(scene, image_size) if background is None else background
    image = layer[..., :3] + bg * (1.0 - layer[..., 3:4])
    visible = remove_occluded_heads(heads, masks, z_order, mode=occlusion,
                                    head_radii=glyphs[:, 2] if len(heads) else None, shape=(h, w))
    return np.clip(image, 0.0, 1.0), visible


def brightness(time_minutes: int) -> float:
    """Global gain by time of day: 1.0 at noon, 0.3 at midnight."""
    return 0.3 + 0.7 * (0.5 - 0.5 * math.cos(2.0 * math.pi * time_minutes / 1440.0))


def render_environment(image: np.ndarray, time_minutes: int, weather: int) -> np.ndarray:
    """Apply time-of-day light and a weather effect to a uint8 RGB image."""
    if not 0 <= time_minutes < 1440 or not 0 <= weather < 7:
        raise ValueError("invalid time or weather code")
    img = np.asarray(image, dtype=np.float64) * brightness(time_minutes)
    rng = np.random.default_rng([time_minutes, weather, 104729])
    gray = img.mean(axis=2, keepdims=True)
    if weather == 1:  # clouds
        img = 0.85 * img + 0.15 * gray
    elif weather in (2, 4):  # rain, thunder
        streaks = gaussian_filter(rng.normal(0.0, 1.0, size=img.shape[:2]), (2.0, 0.3))
        img = img * (0.8 if weather == 4 else 0.9) + 40.0 * streaks[..., None]
    elif weather == 3:  # fog
        haze = 200.0 * brightness(time_minutes)
        blurred = gaussian_filter(img, (2.0, 2.0, 0.0))
        img = 0.45 * blurred + 0.55 * haze
    elif weather == 5:  # overcast
        img = 0.8 * (0.7 * img + 0.3 * gray)
    elif weather == 6:  # extra sunny
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = (img - mean) * 1.3 + mean * 1.05
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _draw_time(rng, window) -> int:
    if window is not None:
        t0, t1 = window
        return int(rng.integers(t0, t1 + 1))
    if rng.random() < DAYTIME_SHARE:
        return int(rng.integers(DAYTIME[0], DAYTIME[1] + 1))
    return int(rng.integers(0, 1440))


def _draw_weather(rng, allowed) -> int:
    codes = np.arange(7) if allowed is None else np.array(sorted(allowed))
    p = np.array([WEATHER_WEIGHTS[c] for c in codes])
    return int(rng.choice(codes, p=p / p.sum()))


def generate_image(spec: GeneratorSpec, scene: SceneMeta, index: int):
    """Render one labeled image; returns (uint8 image, heads, time, weather)."""
    rng = np.random.default_rng([spec.seed, scene.location_id, scene.camera.camera_id, index])
    lo, hi = scene.capacity
    n = int(rng.integers(lo, hi + 1))
    time_minutes = _draw_time(rng, spec.time_window)
    weather = _draw_weather(rng, spec.weathers)
    n_regions = max(1, math.ceil(n / REGION_CAP))
    part = RegionPartition(tuple(equal_area_bands(scene.roi, n_regions)))
    counts = [n // n_regions + (1 if k < n % n_regions else 0) for k in range(n_regions)]
    image, heads = synthesize_congested(scene, part, counts, rng, tuple(spec.image_size),
                                        palette=spec.person_glyph_palette,
                                        person_scale=spec.person_scale, occlusion=spec.occlusion)
    img8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return render_environment(img8, time_minutes, weather), heads, time_minutes, weather


def save_png(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def generate_dataset(spec: GeneratorSpec, out_dir=None) -> Manifest:
    """Build every scene and image; write PNGs and manifest.json when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    samples = []
    h, w = spec.image_size
    for loc in range(spec.n_locations):
        for cam in range(spec.cameras_per_location):
            scene = build_scene(loc, cam, np.random.default_rng([spec.seed, loc, cam]),
                                spec.image_size, spec.levels)
            for k in range(int(spec.images_per_level.get(scene.level, 0))):
                image, heads, t, weather = generate_image(spec, scene, k)
                rel = f"scenes/{loc}_{cam}/{k}.png"
                if out is not None:
                    save_png(image, out / rel)
                samples.append(Sample.build(rel, w, h, heads, t, weather, scene))
    manifest = Manifest(tuple(samples), spec.dataset_name, spec.seed, root=out)
    manifest.validate()
    if out is not None:
        save_manifest(manifest, out / "manifest.json")
    log.info("generated %d images over %d scenes", len(samples), spec.n_locations * spec.cameras_per_location)
    return manifest
