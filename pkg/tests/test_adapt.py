import numpy as np
import pytest

from crowdsim.adapt import LabelAudit, adapt_and_train
from crowdsim.cyclegan import GANConfig, identity_bundle
from crowdsim.density import compute_max_density, density_for_sample, regularize_density
from crowdsim.models import (ModelConfig, TrainConfig, build_model, evaluate_model, evaluate_predictions,
                             predict_density, train_supervised)
from crowdsim.splits import FilterSpec, apply_scene_filter

FAST_GAN = GANConfig(steps=2, gen_channels=4, disc_channels=4, gen_blocks=1, crop=(32, 32))
FAST_TRAIN = TrainConfig(steps=4, lr=1e-4)


def _run(task, **kw):
    opts = dict(real_test=task.real_test, model_cfg=ModelConfig("tiny"), train_cfg=FAST_TRAIN,
                synthetic_images=task.synthetic_images, real_test_images=task.real_test_images)
    opts.update(kw)
    return adapt_and_train(task.synthetic, task.real_train_images, **opts)


def test_identity_bundle_equals_no_adaptation(shift_task):
    res = _run(shift_task, bundle=identity_bundle(), gan_cfg=FAST_GAN)
    # baseline written out directly: train on raw synthetic, evaluate on real with the clamp
    model = build_model(ModelConfig("tiny"), 0)
    train_supervised(model, shift_task.synthetic, FAST_TRAIN)
    bound = compute_max_density(density_for_sample(s) for s in shift_task.synthetic.samples)
    ref = evaluate_model(model, shift_task.real_test, bound, images=shift_task.real_test_images)
    assert res.metrics == ref
    zero = _run(shift_task, gan_cfg=GANConfig(steps=0))
    assert zero.metrics == ref and zero.bundle.is_identity()


def test_label_isolation_audit(shift_task):
    audit = LabelAudit()
    real_test = audit.wrap(shift_task.real_test)
    res = _run(shift_task, real_test=real_test, audit=audit, gan_cfg=FAST_GAN)
    assert res.gan_losses and len(res.gan_losses) == FAST_GAN.steps
    assert audit.reads_outside("evaluate") == []
    assert {r[0] for r in audit.reads} == {"evaluate"}
    assert len(audit.reads) >= len(real_test)
    with pytest.raises(AttributeError):
        real_test.samples[0].heads = ()


def test_evaluation_applies_density_clamp(shift_task):
    seen = {}

    def spike(preds):
        seen["raw"] = [p.copy() for p in preds]
        out = []
        for p in preds:
            q = p.copy()
            q[0, 0] = 1e3
            out.append(q)
        seen["spiked"] = out
        return out

    res = _run(shift_task, bundle=identity_bundle(), prediction_hook=spike)
    assert 1e3 > res.bound.value
    gts = [density_for_sample(s).grid for s in shift_task.real_test.samples]
    clamped = [regularize_density(p, res.bound) for p in seen["spiked"]]
    assert all(c[0, 0] == 0.0 for c in clamped)
    assert res.metrics == evaluate_predictions(clamped, gts)
    unclamped = evaluate_predictions(seen["spiked"], gts)
    assert unclamped["mae"] > res.metrics["mae"] + 900


def test_scene_filter_is_applied(shift_task):
    only = FilterSpec(levels={1})
    res = _run(shift_task, bundle=identity_bundle(), preset=only, real_test=None)
    kept = apply_scene_filter(shift_task.synthetic, only)
    assert 0 < res.n_train == len(kept) < len(shift_task.synthetic)
    assert res.metrics is None
    with pytest.raises(ValueError, match="removed every"):
        _run(shift_task, bundle=identity_bundle(), preset=FilterSpec(count_range=(10_000, None)))
    with pytest.raises(ValueError):
        _run(shift_task, preset="nowhere")


def test_resume_reuses_translator(shift_task, tmp_path):
    a = _run(shift_task, gan_cfg=FAST_GAN, out_dir=tmp_path)
    assert (tmp_path / "gan" / "translator.pt").exists()
    assert (tmp_path / "gan" / "gan_loss.csv").exists()
    assert (tmp_path / "counter" / "checkpoint.pt").exists()
    b = _run(shift_task, gan_cfg=FAST_GAN, out_dir=tmp_path, resume=True)
    assert b.gan_losses == []  # translator loaded, not retrained
    assert a.metrics == b.metrics


def test_translated_images_feed_the_counter(shift_task):
    # translation runs on every kept synthetic image and predictions stay nonnegative
    res = _run(shift_task, gan_cfg=FAST_GAN)
    pred = predict_density(res.model, shift_task.real_test_images[0])
    assert pred.shape == shift_task.real_test_images[0].shape[:2] and (pred >= 0).all()
    assert np.isfinite(res.metrics["mae"])
