"""Translate-then-train domain adaptation with density and scene regularization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .cyclegan import (DomainPair, GANConfig, TranslatorBundle, identity_bundle, load_bundle, train_se_cyclegan,
                       translate)
from .density import MaxDensityBound, compute_max_density, density_for_sample
from .models import (DensityDataset, ModelConfig, TrainConfig, build_model, evaluate_predictions,
                     predict_density, train_supervised)
from .splits import FilterSpec, apply_scene_filter, get_preset
from .synthgen import load_png

log = logging.getLogger(__name__)

LABEL_FIELDS = ("heads", "count")


class LabelAudit:
    """Records every read of a label field together with the stage it happened in."""

    def __init__(self):
        self.stage = "setup"
        self.reads: list = []

    def wrap(self, manifest):
        return manifest.with_samples([AuditedSample(s, self) for s in manifest.samples])

    def reads_outside(self, stage: str) -> list:
        return [r for r in self.reads if r[0] != stage]


class AuditedSample:
    """Read-only proxy over a Sample that reports label access to its audit."""

    def __init__(self, sample, audit: LabelAudit):
        object.__setattr__(self, "_sample", sample)
        object.__setattr__(self, "_audit", audit)

    def __getattr__(self, name):
        if name in LABEL_FIELDS:
            self._audit.reads.append((self._audit.stage, self._sample.image_path, name))
        return getattr(self._sample, name)

    def head_array(self):
        self._audit.reads.append((self._audit.stage, self._sample.image_path, "heads"))
        return self._sample.head_array()

    def __setattr__(self, name, value):
        raise AttributeError("audited samples are read-only")


@dataclass
class AdaptResult:
    model: object
    bundle: TranslatorBundle
    bound: MaxDensityBound
    metrics: Optional[dict]
    train_losses: list = field(default_factory=list)
    gan_losses: list = field(default_factory=list)
    n_train: int = 0


def _images(manifest, images=None):
    if images is not None:
        return list(images)
    return [load_png(manifest.image_file(s)) for s in manifest.samples]


def adapt_and_train(synthetic, real_images, real_test=None, preset="all", gan_cfg: GANConfig = None,
                    model_cfg: ModelConfig = None, train_cfg: TrainConfig = None, out_dir=None,
                    bundle: Optional[TranslatorBundle] = None, audit: Optional[LabelAudit] = None,
                    synthetic_images=None, real_test_images=None,
                    prediction_hook: Optional[Callable] = None, seed: int = 0, resume: bool = False) -> AdaptResult:
    """Filter -> translate synthetic to real -> train a counter on synthetic labels -> test on real.

    ``real_images`` are plain uint8 arrays (or a manifest whose labels are
    never read). Real-domain labels are only touched by the final evaluation.
    A GAN with zero steps, or an injected identity bundle, reduces this to
    the no-adaptation baseline. With ``resume`` and an ``out_dir``, a finished
    translator is reused and the counter continues from its last checkpoint.
    """
    gan_cfg = gan_cfg or GANConfig()
    model_cfg = model_cfg or ModelConfig("tiny")
    train_cfg = train_cfg or TrainConfig()
    audit = audit or LabelAudit()
    out = Path(out_dir) if out_dir is not None else None
    spec = preset if isinstance(preset, FilterSpec) else get_preset(preset)

    def stage(name):
        audit.stage = name
        log.info("adapt: %s", name)

    stage("filter")
    syn_images = _images(synthetic, synthetic_images)
    keep = [i for i, s in enumerate(synthetic.samples) if spec.accepts(s)]
    filtered = apply_scene_filter(synthetic, spec)
    if len(filtered) == 0:
        raise ValueError("scene filter removed every synthetic image")
    syn_images = [syn_images[i] for i in keep]
    bound = compute_max_density(density_for_sample(s, train_cfg.sigma) for s in filtered.samples)

    stage("gan")
    if not isinstance(real_images, (list, tuple)):
        real_images = _images(real_images)
    gan_losses = []
    if bundle is None:
        done = out / "gan" / "translator.pt" if out is not None else None
        if gan_cfg.steps == 0:
            bundle = identity_bundle()
        elif resume and done is not None and done.exists() and load_bundle(done)[1] == gan_cfg:
            bundle = load_bundle(done)[0]
            log.info("adapt: reusing translator %s", done)
        else:
            res = train_se_cyclegan(DomainPair(syn_images, list(real_images)), gan_cfg,
                                    out / "gan" if out is not None else None)
            bundle, gan_losses = res.bundle, res.losses

    stage("translate")
    translated, trans_images = translate(bundle.G_SR, filtered, syn_images,
                                         out / "translated" if out is not None else None)

    stage("train")
    model = build_model(model_cfg, seed)
    data = DensityDataset(translated, train_cfg.sigma, model_cfg.supervise_scale, images=trans_images)
    ckpt = out / "counter" / "checkpoint.pt" if out is not None else None
    start = ckpt if resume and ckpt is not None and ckpt.exists() else None
    tr = train_supervised(model, translated, train_cfg, out / "counter" if out is not None else None, data=data,
                          resume_from=start)

    metrics = None
    if real_test is not None:
        stage("evaluate")
        test_images = _images(real_test, real_test_images)
        preds = [predict_density(tr.model, img, train_cfg.target_scale) for img in test_images]
        if prediction_hook is not None:
            preds = [np.asarray(p) for p in prediction_hook(preds)]
        gts = [density_for_sample(s, train_cfg.sigma).grid for s in real_test.samples]
        metrics = evaluate_predictions(preds, gts, bound)
    stage("done")
    return AdaptResult(tr.model, bundle, bound, metrics, tr.losses, gan_losses, len(filtered))
