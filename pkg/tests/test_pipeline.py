import json

import numpy as np
import pytest

from crowdsim.density import compute_max_density, density_for_sample
from crowdsim.models import ModelConfig, TrainConfig, build_model, evaluate_model, train_supervised
from crowdsim.pipeline import ExperimentSpec, StageError, apply_seed_override, emit_figures, run_experiment

TRAIN = {"steps": 4, "lr": 1e-4}


def _spec(tmp_path, task, name="sup", **kw):
    base = dict(workflow="supervised", seed=3, output_dir=str(tmp_path / name),
                dataset=str(task.root / "synthetic" / "manifest.json"), train=TRAIN)
    base.update(kw)
    return ExperimentSpec.from_json(json.dumps(base))


def _strip(report):
    r = json.loads(json.dumps(report))
    r.pop("output_dir")
    r["config"].pop("output_dir")
    return r


def test_supervised_report_and_rerun(shift_task, tmp_path):
    spec = _spec(tmp_path, shift_task)
    rep = run_experiment(spec)
    assert set(rep["metrics"]) >= {"mae", "mse", "psnr_mean", "ssim_mean"}
    assert rep["sizes"] == {"train": 6, "test": 2}
    assert rep["config"]["train"]["seed"] == 3 and rep["config"]["split"]["strategy"] == "random"
    assert rep["config"]["model"]["backbone"] == "tiny"
    assert len(rep["manifest_hash"]["dataset"]) == 40
    first = (tmp_path / "sup" / "report.json").read_bytes()
    run_experiment(_spec(tmp_path, shift_task), resume=False)
    assert (tmp_path / "sup" / "report.json").read_bytes() == first
    run_experiment(_spec(tmp_path, shift_task))  # resumes from the finished checkpoint
    assert (tmp_path / "sup" / "report.json").read_bytes() == first


def test_interrupted_run_resumes_to_same_report(shift_task, tmp_path):
    full = run_experiment(_spec(tmp_path, shift_task, "full", train={"steps": 6, "lr": 1e-4}))
    run_experiment(_spec(tmp_path, shift_task, "cut", train={"steps": 3, "lr": 1e-4}))
    resumed = run_experiment(_spec(tmp_path, shift_task, "cut", train={"steps": 6, "lr": 1e-4}))
    assert _strip(resumed) == _strip(full)


def test_pretrain_finetune_workflow(shift_task, tmp_path):
    spec = _spec(tmp_path, shift_task, "pf", workflow="pretrain_finetune", dataset=None,
                 synthetic=str(shift_task.root / "synthetic" / "manifest.json"),
                 real=str(shift_task.root / "real" / "manifest.json"), finetune={"steps": 2})
    rep = run_experiment(spec)
    assert rep["config"]["finetune"]["steps"] == 2 and rep["config"]["finetune"]["lr"] == 1e-4
    assert set(rep["curves"]) == {"pretrain", "finetune"} and len(rep["curves"]["finetune"]) == 2
    assert (tmp_path / "pf" / "pretrain" / "checkpoint.pt").exists()
    assert (tmp_path / "pf" / "finetune" / "checkpoint.pt").exists()


def test_adapt_zero_steps_matches_no_adaptation(shift_task, tmp_path):
    root = shift_task.root
    spec = _spec(tmp_path, shift_task, "ad", workflow="adapt", dataset=None,
                 synthetic=str(root / "synthetic" / "manifest.json"), real=str(root / "real" / "scenes"),
                 real_test=str(root / "real" / "manifest.json"), gan={"steps": 0})
    rep = run_experiment(spec)
    from crowdsim.core import load_manifest

    syn = load_manifest(root / "synthetic" / "manifest.json")
    test = load_manifest(root / "real" / "manifest.json")
    model = build_model(ModelConfig("tiny"), 3)
    train_supervised(model, syn, TrainConfig(seed=3, **TRAIN))
    ref = evaluate_model(model, test, compute_max_density(density_for_sample(s) for s in syn.samples))
    for k in ("mae", "mse", "psnr_mean", "ssim_mean", "n"):
        assert rep["metrics"][k] == ref[k]
    assert rep["config"]["gan"]["steps"] == 0 and rep["config"]["gan"]["mu"] == 1.0


def test_spec_validation(shift_task, tmp_path):
    with pytest.raises(ValueError, match="seed"):
        ExperimentSpec.from_json(json.dumps({"workflow": "supervised", "output_dir": "x"}))
    with pytest.raises(ValueError, match="unknown"):
        ExperimentSpec.from_json(json.dumps({"workflow": "supervised", "seed": 1, "output_dir": "x", "foo": 1}))
    with pytest.raises(StageError, match="setup"):
        run_experiment(_spec(tmp_path, shift_task, dataset=str(tmp_path / "missing.json")))
    with pytest.raises(StageError, match="setup"):
        run_experiment(_spec(tmp_path, shift_task, workflow="nope"))
    with pytest.raises(StageError) as exc:
        run_experiment(_spec(tmp_path, shift_task, preset={"count_range": [10000, None]}))
    assert exc.value.stage == "split"


def test_seed_override(monkeypatch, shift_task, tmp_path, caplog):
    monkeypatch.setenv("CROWD_SEED", "11")
    spec = apply_seed_override(_spec(tmp_path, shift_task))
    assert spec.seed == 11 and spec.train_config().seed == 11
    assert "CROWD_SEED" in caplog.text


def test_figures(shift_task, tmp_path):
    rep = run_experiment(_spec(tmp_path, shift_task))
    figs = emit_figures([rep], tmp_path / "fig")
    assert len(figs.paths) >= 2 and all(p.exists() for p in figs.paths)
    assert int(figs.histogram.sum()) == rep["metrics"]["n"]
    again = emit_figures([rep], tmp_path / "fig2")
    assert [p.read_bytes() for p in figs.paths] == [p.read_bytes() for p in again.paths]
    multi = emit_figures([rep, rep], tmp_path / "fig3")
    assert int(multi.histogram.sum()) == 2 * rep["metrics"]["n"]
    with pytest.raises(ValueError):
        emit_figures([], tmp_path / "none")
    assert np.all(np.diff(figs.bin_edges) > 0)
