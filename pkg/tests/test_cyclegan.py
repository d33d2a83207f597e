import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from crowdsim.cyclegan import (LOSS_COLUMNS, DomainPair, GANConfig, GANDiverged, Generator, Identity,
                               TranslatorBundle, adversarial_loss, adversarial_terms, build_bundle, cycle_loss,
                               cyclegan_objective, identity_bundle, load_bundle, reconstruction_ssim,
                               se_cycle_loss, se_reconstruction, total_loss, train_se_cyclegan, translate,
                               translate_image)
from crowdsim.synthgen import load_png

from .oracles import brute_ssim, central_difference


class Shift(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        return x + self.c


class ConstD(nn.Module):
    def __init__(self, v):
        super().__init__()
        self.v = v

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), float(self.v), dtype=x.dtype)


def _imgs(seed, n=2, h=16, w=16, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, h, w, generator=g, dtype=dtype) * 2 - 1)


def _bundle(g1, g2):
    return TranslatorBundle(g1, g2, Identity(), Identity())


def test_cycle_loss_identity_and_inverse():
    s, r = _imgs(0), _imgs(1)
    assert float(cycle_loss(identity_bundle(), s, r)) == 0.0
    assert float(cycle_loss(_bundle(Shift(0.25), Shift(-0.25)), s, r)) == pytest.approx(0.0, abs=1e-7)


def test_cycle_loss_shift_hand_value():
    # 2x2 images; G_SR adds 0.3, G_RS subtracts 0.1: every pixel reconstructs 0.2 off in both directions
    s = torch.zeros(1, 3, 2, 2)
    r = torch.ones(1, 3, 2, 2)
    b = _bundle(Shift(0.3), Shift(-0.1))
    assert float(cycle_loss(b, s, r)) == pytest.approx(0.4, abs=1e-6)
    with pytest.raises(ValueError):
        cycle_loss(b, s, torch.zeros(2, 3, 2, 2))


def test_log_form_uninformative_discriminator():
    zeros = torch.zeros(4, 1, 3, 3)  # logits 0 -> D = 0.5
    g, d = adversarial_terms(zeros, zeros, "log")
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-6)
    assert float(g) == pytest.approx(math.log(0.5), abs=1e-6)
    x = _imgs(3)
    g2, d2 = adversarial_loss(Identity(), ConstD(0.0), x, x, "log")
    assert float(d2) == pytest.approx(-2 * math.log(0.5), abs=1e-6)


def test_lsgan_perfect_discriminator():
    g, d = adversarial_terms(torch.ones(2, 1, 3, 3), torch.zeros(2, 1, 3, 3), "lsgan")
    assert float(d) == 0.0 and float(g) == 1.0


@pytest.mark.parametrize("form", ["lsgan", "log"])
def test_generator_loss_monotone_in_fake_score(form):
    real = torch.zeros(1, 1, 2, 2)
    # lsgan scores are raw outputs in [0, 1]; log scores are logits
    grid = np.linspace(0.0, 1.0, 11) if form == "lsgan" else np.linspace(-6, 6, 13)
    vals = [float(adversarial_terms(real, torch.full((1, 1, 2, 2), float(v)), form)[0]) for v in grid]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        adversarial_terms(real, real, "wgan")


def test_se_cycle_loss_identity_and_range():
    s, r = _imgs(4, h=16, w=16), _imgs(5, h=16, w=16)
    assert float(se_cycle_loss(identity_bundle(), s, r)) == pytest.approx(0.0, abs=1e-6)
    for c in (0.5, 1.5, -1.0):
        v = float(se_cycle_loss(_bundle(Shift(c), Shift(0.0)), s, r))
        assert 0.0 <= v <= 4.0
    # reflection about a shared mean drives SSIM toward -1 and the term toward its bound of 2
    x = 0.5 + 0.3 * _imgs(6, h=16, w=16)
    v = float(se_reconstruction(x, 1.0 - x))
    assert 1.5 < v <= 2.0
    with pytest.raises(ValueError):
        se_cycle_loss(identity_bundle(), _imgs(0, h=8, w=8), _imgs(1, h=8, w=8))


def test_se_reconstruction_matches_bruteforce():
    x, y = _imgs(6, n=1, h=16, w=16, dtype=torch.float64), _imgs(7, n=1, h=16, w=16, dtype=torch.float64)
    ours = float(se_reconstruction(x, y))
    ref = 1 - np.mean([brute_ssim(x[0, c].numpy(), y[0, c].numpy(), L=2.0) for c in range(3)])
    assert ours == pytest.approx(ref, abs=1e-9)


def test_se_gradient_finite_difference_16():
    x = _imgs(8, n=1, h=16, w=16, dtype=torch.float64)
    rec = (x + 0.3 * _imgs(9, n=1, h=16, w=16, dtype=torch.float64)).requires_grad_(True)
    loss = se_reconstruction(x, rec)
    (grad,) = torch.autograd.grad(loss, rec)

    def f(arr):
        return float(se_reconstruction(x, torch.from_numpy(arr)))

    fd = central_difference(f, rec.detach().numpy(), 1e-3)
    err = np.abs(grad.numpy() - fd).max() / max(np.abs(fd).max(), 1e-12)
    assert err <= 1e-2


def _double_bundle(seed):
    b = build_bundle(GANConfig(seed=seed, gen_channels=4, disc_channels=4, gen_blocks=1)).double()
    for m in b.modules().values():
        m.eval()
    return b


@pytest.mark.parametrize("form", ["lsgan", "log"])
def test_mu_zero_reduces_to_plain_objective(form):
    for seed in range(3):
        b = _double_bundle(seed)
        s, r = _imgs(seed, 1, 16, 16, torch.float64), _imgs(seed + 50, 1, 16, 16, torch.float64)
        cfg = GANConfig(mu=0.0, lam=7.0, adv_form=form)
        with torch.no_grad():
            tot, parts, _ = total_loss(b, (s, r), cfg)
            ref = cyclegan_objective(b, s, r, lam=7.0, form=form)
        assert float(tot) == float(ref)
        assert float(parts["se_cycle"]) == 0.0


def test_breakdown_additivity_and_weights():
    b = _double_bundle(1)
    s, r = _imgs(1, 1, 16, 16, torch.float64), _imgs(2, 1, 16, 16, torch.float64)
    with torch.no_grad():
        tot, parts, _ = total_loss(b, (s, r), GANConfig(lam=3.0, mu=2.0))
        assert abs(float(tot) - sum(float(v) for v in parts.values())) <= 1e-6
        assert float(parts["cycle"]) == pytest.approx(3.0 * float(cycle_loss(b, s, r)), rel=1e-12)
        assert float(parts["se_cycle"]) == pytest.approx(2.0 * float(se_cycle_loss(b, s, r)), rel=1e-12)
        adv, parts0, _ = total_loss(b, (s, r), GANConfig(lam=0.0, mu=0.0))
        assert float(adv) == float(parts0["g_adv_SR"] + parts0["g_adv_RS"])


def test_config_validation():
    with pytest.raises(ValueError):
        GANConfig(lam=-1)
    with pytest.raises(ValueError):
        GANConfig(adv_form="hinge")
    assert GANConfig(adv_form="least_squares").adv_form == "lsgan"


def test_generator_preserves_shape():
    g = Generator(4, 1)
    for h, w in ((16, 16), (12, 20), (64, 96)):
        x = _imgs(0, 1, h, w)
        y = g(x)
        assert y.shape == x.shape and float(y.detach().abs().max()) <= 1.0
    with pytest.raises(ValueError):
        g(_imgs(0, 1, 10, 16))


def _toy_pair(rng, n=4, size=(16, 16)):
    s = [rng.integers(0, 256, size=(*size, 3), dtype=np.uint8) for _ in range(n)]
    r = [np.clip(255 - x.astype(int), 0, 255).astype(np.uint8) for x in s]
    return DomainPair(s, r)


def test_zero_steps_returns_initialization(tmp_path):
    pair = _toy_pair(np.random.default_rng(0))
    cfg = GANConfig(steps=0, crop=None, gen_channels=4, disc_channels=4, gen_blocks=1)
    res = train_se_cyclegan(pair, cfg, tmp_path)
    init = build_bundle(cfg)
    for k, m in res.bundle.modules().items():
        for p, q in zip(m.parameters(), init.modules()[k].parameters()):
            assert torch.equal(p, q)
    assert (tmp_path / "gan_loss.csv").read_text().strip() == ",".join(LOSS_COLUMNS)


def test_training_csv_checkpoint_and_determinism(tmp_path):
    pair = _toy_pair(np.random.default_rng(1))
    cfg = GANConfig(steps=3, crop=(12, 12), gen_channels=4, disc_channels=4, gen_blocks=1, seed=4)
    a = train_se_cyclegan(pair, cfg, tmp_path)
    b = train_se_cyclegan(pair, cfg)
    assert a.losses == b.losses
    rows = (tmp_path / "gan_loss.csv").read_text().strip().splitlines()
    assert rows[0].split(",") == list(LOSS_COLUMNS) and len(rows) == 4
    assert all(len(r.split(",")) == 7 for r in rows)
    loaded, cfg2 = load_bundle(tmp_path / "translator.pt")
    assert cfg2 == cfg
    x = torch.zeros(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(loaded.G_SR(x), a.bundle.G_SR(x))


def test_nan_aborts_with_breakdown(monkeypatch):
    import crowdsim.cyclegan as cg

    def poisoned(cfg):
        b = build_bundle(cfg)
        with torch.no_grad():
            b.G_SR.color.bias.fill_(float("nan"))
        return b

    monkeypatch.setattr(cg, "build_bundle", poisoned)
    pair = _toy_pair(np.random.default_rng(2))
    cfg = GANConfig(steps=2, crop=None, gen_channels=4, disc_channels=4, gen_blocks=1)
    with pytest.raises(GANDiverged, match="step 0: g_adv_SR=nan.*se_cycle="):
        train_se_cyclegan(pair, cfg)


def test_translate_identity_keeps_bytes_and_labels(image_manifest, tmp_path):
    imgs = [load_png(image_manifest.image_file(s)) for s in image_manifest.samples]
    out, timgs = translate(Identity(), image_manifest, out_dir=tmp_path / "t")
    assert len(out) == len(image_manifest) == len(timgs)
    for a, b in zip(imgs, timgs):
        assert np.array_equal(a, b)
    for s, t in zip(image_manifest.samples, out.samples):
        assert s == t
    again = [load_png(out.image_file(s)) for s in out.samples]
    assert all(np.array_equal(a, b) for a, b in zip(imgs, again))


def test_translate_learned_generator_keeps_shape(image_manifest):
    g = Generator(4, 1).eval()
    img = load_png(image_manifest.image_file(image_manifest.samples[0]))
    out = translate_image(g, img[:30, :45])
    assert out.shape == (30, 45, 3) and out.dtype == np.uint8
    out_m, _ = translate(g, image_manifest)
    assert [s.heads for s in out_m.samples] == [s.heads for s in image_manifest.samples]


def test_reconstruction_ssim_identity():
    pair = _toy_pair(np.random.default_rng(3))
    assert reconstruction_ssim(identity_bundle(), pair.synthetic, pair.real) == pytest.approx(1.0)


def test_training_progress_on_toy_domains():
    # 16 images per domain; the second domain is a fixed color transform of the first renderer
    rng = np.random.default_rng(5)
    base = []
    for _ in range(32):
        img = np.full((32, 32, 3), 200, np.uint8)
        for _ in range(6):
            y, x = rng.integers(2, 30, size=2)
            img[y - 2:y + 2, x - 2:x + 2] = rng.integers(0, 120, size=3)
        base.append(img)
    shifted = [np.clip(b.astype(float) @ np.array([[0.2, 0.3, 0.5], [0.5, 0.2, 0.1], [0.1, 0.6, 0.2]]).T + 30,
                       0, 255).astype(np.uint8) for b in base[16:]]
    pair = DomainPair(base[:16], shifted)
    cfg = GANConfig(steps=200, crop=None, seed=0, gen_channels=8, disc_channels=8)
    before = reconstruction_ssim(build_bundle(cfg), pair.synthetic, pair.real)
    after = reconstruction_ssim(train_se_cyclegan(pair, cfg).bundle, pair.synthetic, pair.real)
    assert after > before
