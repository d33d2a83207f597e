"""Command line entry point: ``crowdsim <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("crowdsim")


class CliError(Exception):
    def __init__(self, stage, msg):
        super().__init__(msg)
        self.stage = stage


def _seed(args) -> int:
    from .pipeline import SEED_ENV

    env = os.environ.get(SEED_ENV)
    if env:
        log.warning("seed %s from %s overrides --seed %s", env, SEED_ENV, args.seed)
        return int(env)
    return args.seed


def _size(text):
    h, w = text.lower().split("x")
    return int(h), int(w)


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v != "")


def _write_json(obj, path):
    from .pipeline import dumps

    text = dumps(obj)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    sys.stdout.write(text)


# ---- subcommands ----

def cmd_synth_gen(args):
    from .synthgen import GeneratorSpec, generate_dataset

    per_level = {lvl: args.per_level for lvl in (args.levels or range(9))}
    spec = GeneratorSpec(n_locations=args.locations, cameras_per_location=args.cameras,
                         images_per_level=per_level, image_size=args.size, seed=_seed(args),
                         levels=args.levels, weathers=args.weathers,
                         time_window=tuple(args.time_window) if args.time_window else None,
                         person_scale=args.person_scale, occlusion=args.occlusion, dataset_name=args.name)
    m = generate_dataset(spec, args.out)
    print(f"wrote {len(m)} images to {args.out}", file=sys.stderr)


def cmd_split(args):
    from .core import load_manifest, save_manifest
    from .splits import SplitSpec, split

    m = load_manifest(args.manifest)
    train, test = split(m, SplitSpec(args.strategy, args.fraction, _seed(args)))
    out = Path(args.out)
    save_manifest(train, out / "train.json")
    save_manifest(test, out / "test.json")
    print(f"train {len(train)} / test {len(test)}", file=sys.stderr)


def cmd_filter(args):
    from .core import load_manifest, save_manifest
    from .splits import FilterSpec, apply_scene_filter, get_preset, presets_to_json

    if args.dump_presets:
        sys.stdout.write(presets_to_json() + "\n")
        return
    if not args.manifest or not args.out:
        raise CliError("filter", "--manifest and --out are required")
    spec = FilterSpec.from_json(Path(args.spec).read_text()) if args.spec else get_preset(args.preset)
    m = load_manifest(args.manifest)
    kept = apply_scene_filter(m, spec)
    save_manifest(kept, args.out)
    print(f"kept {len(kept)} of {len(m)} images", file=sys.stderr)


def _train_cfg(args, seed):
    from .models import TrainConfig

    return TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=seed,
                       sigma=args.sigma, checkpoint_every=args.checkpoint_every)


def cmd_train(args):
    from .core import load_manifest
    from .models import build_model, model_config, train_supervised

    seed = _seed(args)
    m = load_manifest(args.manifest)
    model = build_model(model_config(args.model), seed)
    ckpt = Path(args.out) / "checkpoint.pt"
    resume = ckpt if args.resume and ckpt.exists() else None
    res = train_supervised(model, m, _train_cfg(args, seed), args.out, resume_from=resume)
    print(f"trained {res.step} steps, final loss {res.losses[-1] if res.losses else float('nan'):.6g}",
          file=sys.stderr)


def cmd_finetune(args):
    from .core import load_manifest
    from .models import finetune

    res = finetune(args.checkpoint, load_manifest(args.manifest), _train_cfg(args, _seed(args)), args.out)
    print(f"finetuned {res.step} steps", file=sys.stderr)


def cmd_adapt(args):
    from .adapt import adapt_and_train
    from .core import load_manifest
    from .cyclegan import GANConfig
    from .models import model_config
    from .pipeline import load_real_images

    seed = _seed(args)
    gan = GANConfig(lam=args.lam, mu=args.mu, adv_form=args.adv_form, steps=args.steps, seed=seed)
    syn = load_manifest(args.synthetic)
    real = load_real_images(args.real)
    test = load_manifest(args.real_test) if args.real_test else None
    res = adapt_and_train(syn, real, test, args.preset, gan, model_config(args.model),
                          _train_cfg(argparse.Namespace(**{**vars(args), "steps": args.counter_steps}), seed),
                          args.out, seed=seed, resume=args.resume)
    out = {"max_density": res.bound.value, "n_train": res.n_train}
    if res.metrics is not None:
        out["metrics"] = {k: res.metrics[k] for k in ("mae", "mse", "psnr_mean", "ssim_mean", "n", "n_inf")}
    _write_json(out, Path(args.out) / "adapt.json")


def cmd_eval(args):
    from .core import load_manifest
    from .density import MaxDensityBound, compute_max_density, density_for_sample
    from .models import evaluate_model, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    bound = None
    if args.max_density is not None:
        bound = MaxDensityBound(args.max_density)
    elif args.bound_from:
        bound = compute_max_density(density_for_sample(s, args.sigma) for s in load_manifest(args.bound_from))
    metrics = evaluate_model(model, load_manifest(args.manifest), bound, args.sigma)
    _write_json({k: metrics[k] for k in ("mae", "mse", "psnr_mean", "ssim_mean", "n", "n_inf")}, args.out)


def cmd_report(args):
    from .pipeline import emit_figures

    reports = [json.loads(Path(p).read_text()) for p in args.reports]
    figs = emit_figures(reports, args.out)
    for p in figs.paths:
        print(p)


def cmd_run(args):
    from .pipeline import ExperimentSpec, apply_seed_override, run_experiment

    spec = apply_seed_override(ExperimentSpec.from_json(args.spec))
    report = run_experiment(spec, resume=not args.no_resume)
    print(json.dumps(report.get("metrics", {}), sort_keys=True))


def _train_args(p, steps=1000):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crowdsim", description="Synthetic crowd counting toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a labeled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--locations", type=int, default=100)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--per-level", type=int, default=30, help="images per scene of each level")
    p.add_argument("--levels", type=_ints, default=None)
    p.add_argument("--weathers", type=_ints, default=None)
    p.add_argument("--time-window", type=int, nargs=2, default=None, metavar=("START", "END"))
    p.add_argument("--size", type=_size, default=(270, 480), help="HxW")
    p.add_argument("--person-scale", type=float, default=1.0)
    p.add_argument("--occlusion", choices=("center", "area"), default="center")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("split", help="train/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=("random", "cross_camera", "cross_location"), default="random")
    p.add_argument("--fraction", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("filter", help="scene filter by preset or JSON spec")
    p.add_argument("--manifest")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default="all")
    g.add_argument("--spec")
    p.add_argument("--out")
    p.add_argument("--dump-presets", action="store_true", help="print the preset table as JSON")
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("train", help="supervised counter training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default="sfcn", help="tiny, fcn, sfcn or sfcn_dagger")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    _train_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="continue training every parameter from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _train_args(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("adapt", help="translate synthetic to real, then train a counter")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--real", required=True, help="image directory or manifest (labels unused)")
    p.add_argument("--real-test", help="labeled real manifest for the final evaluation")
    p.add_argument("--preset", default="all")
    p.add_argument("--steps", type=int, default=200, help="GAN steps; 0 skips translation")
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--adv-form", choices=("lsgan", "log"), default="lsgan")
    p.add_argument("--model", default="tiny")
    p.add_argument("--counter-steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="count and density metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    b = p.add_mutually_exclusive_group()
    b.add_argument("--max-density", type=float, help="MAX_S clamp value")
    b.add_argument("--bound-from", help="manifest whose densities define MAX_S")
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="figures from report JSON files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("run", help="run a JSON experiment spec end to end")
    p.add_argument("--spec", required=True)
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .pipeline import StageError

    try:
        args.fn(args)
    except StageError as exc:
        print(f"[{args.command}:{exc.stage}] {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 1
    except CliError as exc:
        print(f"[{exc.stage}] {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any failure as a tagged diagnostic
        print(f"[{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
