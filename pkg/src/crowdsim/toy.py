"""Small, CPU-sized tasks for paired-run comparisons."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import Manifest, save_manifest
from .splits import SplitSpec, split
from .synthgen import GeneratorSpec, generate_dataset, load_png, render_environment, save_png

TOY_SIZE = (64, 96)
NOON = (720, 720)

# fixed affine color map defining the "real" domain: inverted luminance with a channel mix
COLOR_MATRIX = -np.array([[0.2, 0.3, 0.4],
                          [0.4, 0.2, 0.2],
                          [0.2, 0.5, 0.1]])
COLOR_OFFSET = np.array([230.0, 220.0, 200.0])

def toy_spec(seed: int, per_scene: int = 2, n_locations: int = 2, image_size=TOY_SIZE, **kw) -> GeneratorSpec:
    """Clear-noon scenes at levels 1-2 with persons drawn large enough for 64-row images."""
    opts = dict(n_locations=n_locations, cameras_per_location=4, images_per_level={1: per_scene, 2: per_scene},
                image_size=tuple(image_size), levels=(1, 2), weathers=(0,), time_window=NOON,
                person_scale=2.0, seed=seed, dataset_name=f"toy{seed}")
    opts.update(kw)
    return GeneratorSpec(**opts)


def _load(manifest: Manifest):
    return [load_png(manifest.image_file(s)) for s in manifest.samples]


def color_shift(img: np.ndarray) -> np.ndarray:
    out = np.asarray(img, dtype=np.float64) @ COLOR_MATRIX.T + COLOR_OFFSET
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def restyle(manifest: Manifest, images, fn, out_dir=None, name=None):
    """Apply ``fn`` to every image; labels and metadata are unchanged."""
    new = [fn(img, s) for img, s in zip(images, manifest.samples)]
    out = Manifest(manifest.samples, name or manifest.dataset_name, manifest.generation_seed,
                   root=Path(out_dir) if out_dir is not None else manifest.root)
    if out_dir is not None:
        for img, s in zip(new, out.samples):
            save_png(img, Path(out_dir) / s.image_path)
        save_manifest(out, Path(out_dir) / "manifest.json")
    return out, new


@dataclass
class TwoDomainTask:
    synthetic: Manifest
    synthetic_images: list
    real_train_images: list  # unlabeled
    real_test: Manifest
    real_test_images: list


def color_shift_task(root, seed: int = 0, per_scene: int = 4, image_size=TOY_SIZE) -> TwoDomainTask:
    """Synthetic domain vs the same renderer behind a fixed color transform.

    The synthetic domain has 8 scenes x ``per_scene`` images and the real pool
    twice that, split into an unlabeled half for translation and a labeled
    test half.
    """
    root = Path(root)
    syn = generate_dataset(toy_spec(seed, per_scene, image_size=image_size), root / "synthetic")
    raw = generate_dataset(toy_spec(seed + 1000, per_scene * 2, image_size=image_size), root / "real_raw")
    real, real_imgs = restyle(raw, _load(raw), lambda img, s: color_shift(img), root / "real", "toy_real")
    train_m, test_m = split(real, SplitSpec("random", 0.5, seed))
    index = {s.image_path: i for i, s in enumerate(real.samples)}
    train_imgs = [real_imgs[index[s.image_path]] for s in train_m.samples]
    test_imgs = [real_imgs[index[s.image_path]] for s in test_m.samples]
    return TwoDomainTask(syn, _load(syn), train_imgs, test_m, test_imgs)


@dataclass
class TransferTask:
    source: Manifest
    source_images: list
    target_train: Manifest
    target_train_images: list
    target_test: Manifest
    target_test_images: list


# target rendering condition: dusk under fog
TARGET_TIME = 1080
TARGET_WEATHER = 3


def transfer_task(root, seed: int = 0, n_source_scenes: int = 4, n_target_train: int = 4,
                  image_size=TOY_SIZE) -> TransferTask:
    """Source renders at clear noon; target is the same renderer at foggy dusk.

    The target has a few labeled training images and a held-out test set.
    """
    root = Path(root)
    src = generate_dataset(toy_spec(seed, 2, n_source_scenes, image_size=image_size), root / "source")
    tgt_raw = generate_dataset(toy_spec(seed + 2000, 2, 2, image_size=image_size), root / "target_raw")

    def shift(img, s):
        return render_environment(img, TARGET_TIME, TARGET_WEATHER)

    def relabel(m, t, w):
        samples = [replace(s, time_minutes=t, weather=w) for s in m.samples]
        return m.with_samples(samples)

    tgt_raw = relabel(tgt_raw, TARGET_TIME, TARGET_WEATHER)
    tgt, tgt_imgs = restyle(tgt_raw, _load(tgt_raw), shift, root / "target", "toy_target")
    order = np.random.default_rng(seed).permutation(len(tgt))
    tr_ids, te_ids = sorted(order[:n_target_train].tolist()), sorted(order[n_target_train:].tolist())
    tr = tgt.with_samples([tgt.samples[i] for i in tr_ids])
    te = tgt.with_samples([tgt.samples[i] for i in te_ids])
    return TransferTask(src, _load(src), tr, [tgt_imgs[i] for i in tr_ids], te, [tgt_imgs[i] for i in te_ids])
