"""One-shot experiment runner for the three workflows, plus report figures."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .adapt import adapt_and_train
from .core import load_manifest, manifest_hash
from .cyclegan import GANConfig
from .density import compute_max_density, density_for_sample, load_density, regularize_density, save_density
from .models import (ModelConfig, TrainConfig, build_model, evaluate_predictions, finetune, load_checkpoint,
                     predict_density, train_supervised)
from .splits import FilterSpec, SplitSpec, apply_scene_filter, get_preset, split
from .synthgen import load_png

log = logging.getLogger(__name__)

WORKFLOWS = ("supervised", "pretrain_finetune", "adapt")
METRIC_KEYS = ("mae", "mse", "psnr_mean", "ssim_mean", "n", "n_inf")
SEED_ENV = "CROWD_SEED"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _dc(cls, obj, tuples=()):
    obj = dict(obj or {})
    extra = set(obj) - {f.name for f in fields(cls)}
    if extra:
        raise ValueError(f"unknown {cls.__name__} fields {sorted(extra)}")
    for k in tuples:
        if obj.get(k) is not None:
            obj[k] = tuple(obj[k])
    return cls(**obj)


@dataclass
class ExperimentSpec:
    workflow: str
    seed: int
    output_dir: str
    dataset: Optional[str] = None  # supervised: the one manifest
    synthetic: Optional[str] = None  # pretrain_finetune / adapt
    real: Optional[str] = None  # manifest, or for adapt an image directory
    real_test: Optional[str] = None  # adapt: labeled real test manifest
    split: dict = field(default_factory=dict)
    preset: object = "all"  # preset name or filter fields
    model: dict = field(default_factory=lambda: {"backbone": "tiny"})
    train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    density_regularization: bool = True

    @classmethod
    def from_json(cls, obj) -> "ExperimentSpec":
        if isinstance(obj, (str, Path)) and Path(obj).exists():
            obj = json.loads(Path(obj).read_text())
        elif isinstance(obj, str):
            obj = json.loads(obj)
        if "seed" not in obj:
            raise ValueError("experiment spec must set a seed")
        return _dc(cls, obj)

    def validate(self) -> None:
        if self.workflow not in WORKFLOWS:
            raise ValueError(f"workflow must be one of {WORKFLOWS}")
        need = {"supervised": ("dataset",), "pretrain_finetune": ("synthetic", "real"),
                "adapt": ("synthetic", "real")}[self.workflow]
        for key in need:
            if getattr(self, key) is None:
                raise ValueError(f"workflow {self.workflow} needs {key!r}")
        for key in ("dataset", "synthetic", "real", "real_test"):
            p = getattr(self, key)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"{key} path {p} does not exist")
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")

    # materialized sub-configs; stage seeds default to the experiment seed
    def filter_spec(self) -> FilterSpec:
        if isinstance(self.preset, str):
            return get_preset(self.preset)
        return FilterSpec.from_json(self.preset)

    def split_spec(self) -> SplitSpec:
        return _dc(SplitSpec, {"seed": self.seed, **self.split})

    def model_config(self) -> ModelConfig:
        return _dc(ModelConfig, self.model, ("dilation_channels",))

    def train_config(self) -> TrainConfig:
        return _dc(TrainConfig, {"seed": self.seed, **self.train}, ("crop",))

    def finetune_config(self) -> TrainConfig:
        base = {**asdict(self.train_config()), **self.finetune}
        return _dc(TrainConfig, base, ("crop",))

    def gan_config(self) -> GANConfig:
        return _dc(GANConfig, {"seed": self.seed, **self.gan}, ("crop",))

    def effective(self) -> dict:
        """Full configuration with every default written out."""
        out = asdict(self)
        out["preset"] = {"name": self.preset if isinstance(self.preset, str) else None,
                         **self.filter_spec().to_json()}
        out["split"] = asdict(self.split_spec())
        out["model"] = asdict(self.model_config())
        out["train"] = asdict(self.train_config())
        if self.workflow == "pretrain_finetune":
            out["finetune"] = asdict(self.finetune_config())
        if self.workflow == "adapt":
            out["gan"] = asdict(self.gan_config())
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n"


def apply_seed_override(spec: ExperimentSpec) -> ExperimentSpec:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return spec
    seed = int(env)
    log.warning("seed %d from %s overrides spec seed %d", seed, SEED_ENV, spec.seed)
    spec.seed = seed
    return spec


def _train_stage(model_cfg, manifest, cfg, out, init_checkpoint=None, resume=True):
    """Train, or pick up from out/checkpoint.pt when it exists."""
    ckpt = out / "checkpoint.pt"
    start = ckpt if resume and ckpt.exists() else None
    if init_checkpoint is not None and start is None:
        return finetune(init_checkpoint, manifest, cfg, out)
    if init_checkpoint is not None:
        model, _ = load_checkpoint(init_checkpoint)
    else:
        model = build_model(model_cfg, cfg.seed)
    return train_supervised(model, manifest, cfg, out, resume_from=start)


def _evaluate(model, manifest, bound, cfg: TrainConfig, out: Path):
    preds, gts = [], []
    for s in manifest.samples:
        preds.append(predict_density(model, load_png(manifest.image_file(s)), cfg.target_scale))
        gts.append(density_for_sample(s, cfg.sigma).grid)
    metrics = evaluate_predictions(preds, gts, bound)
    _save_example(out, preds, gts, bound)
    return metrics


def _save_example(out: Path, preds, gts, bound):
    p = preds[0] if bound is None else regularize_density(preds[0], bound)
    save_density(p, out / "example_pred.bin")
    save_density(gts[0], out / "example_gt.bin")


def _hashes(spec: ExperimentSpec) -> dict:
    out = {}
    for key in ("dataset", "synthetic", "real", "real_test"):
        p = getattr(spec, key)
        if p is not None and Path(p).is_file():
            out[key] = manifest_hash(p)
    return out


def load_real_images(path):
    p = Path(path)
    if p.is_file():
        m = load_manifest(p)
        return [load_png(m.image_file(s)) for s in m.samples]
    files = sorted(f for f in p.rglob("*") if f.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images under {p}")
    return [load_png(f) for f in files]


def run_experiment(spec: ExperimentSpec, resume: bool = True) -> dict:
    """Run one workflow end to end and write ``report.json`` to the output directory."""
    with _Stage("setup"):
        spec.validate()
    out = Path(spec.output_dir)
    model_cfg = spec.model_config()
    tcfg = spec.train_config()
    fspec = spec.filter_spec()
    report = {"workflow": spec.workflow, "seed": spec.seed, "config": spec.effective(),
              "manifest_hash": _hashes(spec)}

    if spec.workflow == "supervised":
        with _Stage("split"):
            data = apply_scene_filter(load_manifest(spec.dataset), fspec)
            train_m, test_m = split(data, spec.split_spec())
        with _Stage("train"):
            res = _train_stage(model_cfg, train_m, tcfg, out / "train", resume=resume)
            bound = compute_max_density(density_for_sample(s, tcfg.sigma) for s in train_m.samples)
        with _Stage("evaluate"):
            metrics = _evaluate(res.model, test_m, bound if spec.density_regularization else None, tcfg, out)
        curves = {"train": res.losses}
        sizes = {"train": len(train_m), "test": len(test_m)}

    elif spec.workflow == "pretrain_finetune":
        with _Stage("split"):
            syn = apply_scene_filter(load_manifest(spec.synthetic), fspec)
            train_m, test_m = split(load_manifest(spec.real), spec.split_spec())
        with _Stage("pretrain"):
            pre = _train_stage(model_cfg, syn, tcfg, out / "pretrain", resume=resume)
            bound = compute_max_density(density_for_sample(s, tcfg.sigma) for s in syn.samples)
        with _Stage("finetune"):
            fine = _train_stage(model_cfg, train_m, spec.finetune_config(), out / "finetune",
                                init_checkpoint=out / "pretrain" / "checkpoint.pt", resume=resume)
        with _Stage("evaluate"):
            metrics = _evaluate(fine.model, test_m, bound if spec.density_regularization else None, tcfg, out)
        curves = {"pretrain": pre.losses, "finetune": fine.losses}
        sizes = {"synthetic": len(syn), "train": len(train_m), "test": len(test_m)}

    else:
        with _Stage("load"):
            syn = load_manifest(spec.synthetic)
            real_images = load_real_images(spec.real)
            test_m = load_manifest(spec.real_test) if spec.real_test else None
        with _Stage("adapt"):
            # the real test set is scored once, below, with the same MAX_S clamp
            res = adapt_and_train(syn, real_images, None, fspec, spec.gan_config(), model_cfg, tcfg, out,
                                  seed=tcfg.seed, resume=resume)
        metrics = None
        bound = res.bound
        if test_m is not None:
            with _Stage("evaluate"):
                metrics = _evaluate(res.model, test_m, bound, tcfg, out)
        curves = {"train": res.train_losses}
        if res.gan_losses:
            curves["gan_total"] = [sum(v for k, v in r.items() if k in ("g_adv_SR", "g_adv_RS", "cycle", "se_cycle"))
                                   for r in res.gan_losses]
        sizes = {"synthetic": res.n_train, "test": len(test_m) if test_m is not None else 0}

    with _Stage("report"):
        if metrics is not None:
            report["metrics"] = {k: metrics[k] for k in METRIC_KEYS}
            report["counts"] = {"pred": metrics["pred_counts"], "gt": metrics["gt_counts"]}
        report["max_density"] = bound.value
        report["sizes"] = sizes
        report["curves"] = curves
        report["output_dir"] = str(out)
        (out / "report.json").write_text(dumps(report))
    return report


# ---- figures ----

@dataclass
class FigureSet:
    paths: list
    histogram: np.ndarray
    bin_edges: np.ndarray


def emit_figures(reports, out_dir, bins: int = 10) -> FigureSet:
    """Loss curves, a count histogram and (when saved) a predicted-vs-GT density pair."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = list(reports)
    if not reports:
        raise ValueError("emit_figures needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, rep in enumerate(reports):
        for name, ys in sorted(rep.get("curves", {}).items()):
            if ys:
                ax.plot(np.arange(len(ys)), ys, label=f"{i}:{rep['workflow']}:{name}", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if ax.lines:
        ax.legend(fontsize=7)
    paths.append(out / "loss_curves.png")
    fig.savefig(paths[-1], dpi=80, metadata=meta)
    plt.close(fig)

    gt = np.concatenate([np.asarray(r.get("counts", {}).get("gt", []), dtype=float) for r in reports])
    hist, edges = np.histogram(gt, bins=bins) if gt.size else (np.zeros(bins, int), np.linspace(0, 1, bins + 1))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], hist, width=np.diff(edges), align="edge", edgecolor="k")
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("images")
    paths.append(out / "count_histogram.png")
    fig.savefig(paths[-1], dpi=80, metadata=meta)
    plt.close(fig)

    for i, rep in enumerate(reports):
        base = Path(rep.get("output_dir", ""))
        if not (base / "example_pred.bin").exists():
            continue
        pred = load_density(base / "example_pred.bin").grid
        gtm = load_density(base / "example_gt.bin").grid
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        top = max(float(pred.max()), float(gtm.max()), 1e-6)
        for a, g, title in ((axes[0], gtm, f"GT {gtm.sum():.1f}"), (axes[1], pred, f"pred {pred.sum():.1f}")):
            a.imshow(g, cmap="jet", vmin=0, vmax=top)
            a.set_title(title)
            a.axis("off")
        paths.append(out / f"density_pair_{i}.png")
        fig.savefig(paths[-1], dpi=80, metadata=meta)
        plt.close(fig)
    return FigureSet(paths, hist, edges)
