"""Unpaired synthetic/real translation with SSIM-embedded cycle consistency.

Images live in [-1, 1] inside the networks. ``G_SR`` maps synthetic to
real, ``G_RS`` the reverse; ``D_R`` and ``D_S`` score patches of their
domain.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import SsimParams, ssim_torch

log = logging.getLogger(__name__)

ADV_FORMS = ("lsgan", "log")
LOSS_COLUMNS = ("step", "g_adv_SR", "g_adv_RS", "d_R", "d_S", "cycle", "se_cycle")
# [-1, 1] images span a range of 2
IMAGE_SSIM = SsimParams(data_range=2.0)
CHECKPOINT_FORMAT = "crowdsim-translator"


class GANDiverged(RuntimeError):
    pass


@dataclass
class GANConfig:
    lam: float = 10.0
    mu: float = 1.0
    adv_form: str = "lsgan"
    steps: int = 200
    seed: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    crop: Optional[tuple] = (64, 64)  # training window (h, w); None uses whole images
    gen_channels: int = 16
    gen_blocks: int = 3
    disc_channels: int = 16
    pool_size: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.adv_form == "least_squares":
            self.adv_form = "lsgan"
        if self.adv_form not in ADV_FORMS:
            raise ValueError(f"adv_form must be one of {ADV_FORMS}, got {self.adv_form!r}")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")


# ---- networks ----

class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Two stride-2 downsamples, residual blocks, two upsamples, tanh output.

    Input height and width must be multiples of 4; output keeps the shape.
    """

    def __init__(self, ch: int = 16, blocks: int = 3):
        super().__init__()
        self.stem = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(3, ch, 7), nn.InstanceNorm2d(ch),
                                  nn.ReLU(inplace=True))
        self.down = nn.Sequential(
            nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * ch), nn.ReLU(inplace=True),
            nn.Conv2d(2 * ch, 4 * ch, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * ch), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResBlock(4 * ch) for _ in range(blocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * ch, 2 * ch, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * ch), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * ch, ch, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
        )
        # full-resolution skip keeps thin structures (small heads) through the bottleneck
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(2 * ch, 3, 7))
        # per-pixel color path; instance norm elsewhere discards absolute color
        self.color = nn.Conv2d(3, 3, 1)

    def forward(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"generator input {tuple(x.shape[-2:])} must be a multiple of 4")
        s = self.stem(x)
        y = self.up(self.blocks(self.down(s)))
        return torch.tanh(self.head(torch.cat([y, s], dim=1)) + self.color(x))


class Discriminator(nn.Module):
    """Three-layer patch classifier returning a score map (logits for the log form)."""

    def __init__(self, ch: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * ch, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class Identity(nn.Module):
    def forward(self, x):
        return x


@dataclass
class TranslatorBundle:
    G_SR: nn.Module
    G_RS: nn.Module
    D_R: nn.Module
    D_S: nn.Module

    def modules(self):
        return {"G_SR": self.G_SR, "G_RS": self.G_RS, "D_R": self.D_R, "D_S": self.D_S}

    def state_dict(self):
        return {k: m.state_dict() for k, m in self.modules().items()}

    def load_state_dict(self, state):
        for k, m in self.modules().items():
            m.load_state_dict(state[k])

    def double(self):
        for m in self.modules().values():
            m.double()
        return self

    def is_identity(self) -> bool:
        return isinstance(self.G_SR, Identity) and isinstance(self.G_RS, Identity)


def _init_normal(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        nn.init.zeros_(m.bias)


def build_bundle(cfg: GANConfig) -> TranslatorBundle:
    torch.manual_seed(cfg.seed)
    b = TranslatorBundle(Generator(cfg.gen_channels, cfg.gen_blocks), Generator(cfg.gen_channels, cfg.gen_blocks),
                         Discriminator(cfg.disc_channels), Discriminator(cfg.disc_channels))
    for m in b.modules().values():
        m.apply(_init_normal)
    return b


def identity_bundle() -> TranslatorBundle:
    return TranslatorBundle(Identity(), Identity(), Identity(), Identity())


# ---- objectives ----

def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] == 0:
        raise ValueError("empty batch")


def l1_reconstruction(x, rec):
    _check_pair(x, rec)
    return (x - rec).abs().mean()


def se_reconstruction(x, rec, params: SsimParams = IMAGE_SSIM):
    """Batch mean of 1 - SSIM(x, rec); differentiable."""
    _check_pair(x, rec)
    return (1.0 - ssim_torch(x, rec, params)).mean()


def _cycle(bundle, batch_S, batch_R):
    _check_pair(batch_S, batch_R)
    rec_S = bundle.G_RS(bundle.G_SR(batch_S))
    rec_R = bundle.G_SR(bundle.G_RS(batch_R))
    return rec_S, rec_R


def cycle_loss(bundle: TranslatorBundle, batch_S, batch_R):
    """L1 cycle consistency over both directions."""
    rec_S, rec_R = _cycle(bundle, batch_S, batch_R)
    return l1_reconstruction(batch_S, rec_S) + l1_reconstruction(batch_R, rec_R)


def se_cycle_loss(bundle: TranslatorBundle, batch_S, batch_R, ssim_params: SsimParams = IMAGE_SSIM):
    """Sum of the two (1 - SSIM) reconstruction terms, each in [0, 2]."""
    rec_S, rec_R = _cycle(bundle, batch_S, batch_R)
    return se_reconstruction(batch_S, rec_S, ssim_params) + se_reconstruction(batch_R, rec_R, ssim_params)


def adversarial_terms(real_scores, fake_scores, form: str = "lsgan"):
    """(g_loss, d_loss) from discriminator outputs on real and generated images.

    ``log``: scores are logits, d_loss = -E log D(real) - E log(1 - D(fake)) and
    the generator minimizes E log(1 - D(fake)). ``lsgan``: squared error to
    real=1 / fake=0 for D (halved, as usual), fake=1 for G.
    """
    if form == "log":
        d_loss = -(F.logsigmoid(real_scores).mean() + F.logsigmoid(-fake_scores).mean())
        g_loss = F.logsigmoid(-fake_scores).mean()
    elif form == "lsgan":
        d_loss = 0.5 * (((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean())
        g_loss = ((fake_scores - 1.0) ** 2).mean()
    else:
        raise ValueError(f"unknown adversarial form {form!r}")
    return g_loss, d_loss


def adversarial_loss(G, D, batch_src, batch_tgt, form: str = "lsgan"):
    """Adversarial pair for G: src -> tgt judged by D. d_loss sees a detached fake."""
    fake = G(batch_src)
    g_loss, _ = adversarial_terms(D(batch_tgt), D(fake), form)
    _, d_loss = adversarial_terms(D(batch_tgt), D(fake.detach()), form)
    return g_loss, d_loss


def total_loss(bundle: TranslatorBundle, batches, cfg: GANConfig):
    """Generator objective and its weighted parts (which add up to the total)."""
    batch_S, batch_R = batches
    fake_R = bundle.G_SR(batch_S)
    fake_S = bundle.G_RS(batch_R)
    g_sr, _ = adversarial_terms(bundle.D_R(batch_R), bundle.D_R(fake_R), cfg.adv_form)
    g_rs, _ = adversarial_terms(bundle.D_S(batch_S), bundle.D_S(fake_S), cfg.adv_form)
    rec_S = bundle.G_RS(fake_R)
    rec_R = bundle.G_SR(fake_S)
    cyc = cfg.lam * (l1_reconstruction(batch_S, rec_S) + l1_reconstruction(batch_R, rec_R))
    if cfg.mu:
        se = cfg.mu * (se_reconstruction(batch_S, rec_S) + se_reconstruction(batch_R, rec_R))
    else:
        se = torch.zeros((), dtype=batch_S.dtype)
    total = g_sr + g_rs + cyc + se
    parts = {"g_adv_SR": g_sr, "g_adv_RS": g_rs, "cycle": cyc, "se_cycle": se}
    return total, parts, (fake_R, fake_S)


def cyclegan_objective(bundle: TranslatorBundle, batch_S, batch_R, lam: float = 10.0, form: str = "lsgan"):
    """Plain cycle-consistent objective: two adversarial terms plus lambda * L1 cycle."""
    g_sr, _ = adversarial_loss(bundle.G_SR, bundle.D_R, batch_S, batch_R, form)
    g_rs, _ = adversarial_loss(bundle.G_RS, bundle.D_S, batch_R, batch_S, form)
    return g_sr + g_rs + lam * cycle_loss(bundle, batch_S, batch_R)


# ---- data ----

def to_unit(img: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float 3xHxW in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1) / 127.5 - 1.0


def from_unit(x: torch.Tensor) -> np.ndarray:
    arr = ((x.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).permute(1, 2, 0).numpy()
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def _pad4(x):
    h, w = x.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x


class ImagePool:
    """History buffer of generated images shown to the discriminator."""

    def __init__(self, size: int, rng):
        self.size = size
        self.rng = rng
        self.items: list = []

    def query(self, batch):
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            if len(self.items) < self.size:
                self.items.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                k = int(self.rng.integers(len(self.items)))
                out.append(self.items[k].clone())
                self.items[k] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


def _draw(images, seed, step, domain, cfg: GANConfig):
    rng = np.random.default_rng([seed, step, domain])
    ids = rng.integers(len(images), size=cfg.batch_size)
    out = []
    for i in ids:
        x = images[int(i)]
        if cfg.crop is not None:
            ch, cw = cfg.crop
            h, w = x.shape[-2:]
            if h >= ch and w >= cw:
                top = int(rng.integers(0, h - ch + 1))
                left = int(rng.integers(0, w - cw + 1))
                x = x[:, top:top + ch, left:left + cw]
        out.append(_pad4(x[None])[0])
    return torch.stack(out)


@dataclass
class DomainPair:
    synthetic: list  # uint8 images from the labeled synthetic domain
    real: list  # uint8 images, never any labels

    def __post_init__(self):
        if not self.synthetic or not self.real:
            raise ValueError("both domains need at least one image")


@dataclass
class GANResult:
    bundle: TranslatorBundle
    losses: list = field(default_factory=list)  # one dict per step


def reconstruction_ssim(bundle: TranslatorBundle, images_S, images_R) -> float:
    """Mean SSIM between each image and its cycle reconstruction, both domains."""
    vals = []
    with torch.no_grad():
        for imgs, fwd, bwd in ((images_S, bundle.G_SR, bundle.G_RS), (images_R, bundle.G_RS, bundle.G_SR)):
            for img in imgs:
                x = _pad4(to_unit(img)[None])
                vals.append(float(ssim_torch(x, bwd(fwd(x)), IMAGE_SSIM)[0]))
    return float(np.mean(vals))


def train_se_cyclegan(pair: DomainPair, cfg: GANConfig, out_dir=None) -> GANResult:
    """Alternating generator / discriminator Adam updates on unpaired draws."""
    bundle = build_bundle(cfg)
    tensors_S = [to_unit(i) for i in pair.synthetic]
    tensors_R = [to_unit(i) for i in pair.real]
    gen_params = list(bundle.G_SR.parameters()) + list(bundle.G_RS.parameters())
    dis_params = list(bundle.D_R.parameters()) + list(bundle.D_S.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(dis_params, lr=cfg.lr, betas=(cfg.beta1, 0.999))
    pool_R = ImagePool(cfg.pool_size, np.random.default_rng([cfg.seed, 7, 0]))
    pool_S = ImagePool(cfg.pool_size, np.random.default_rng([cfg.seed, 7, 1]))
    out = Path(out_dir) if out_dir is not None else None
    losses = []
    for step in range(cfg.steps):
        batch_S = _draw(tensors_S, cfg.seed, step, 0, cfg)
        batch_R = _draw(tensors_R, cfg.seed, step, 1, cfg)
        if batch_S.shape != batch_R.shape:
            h = min(batch_S.shape[-2], batch_R.shape[-2]) // 4 * 4
            w = min(batch_S.shape[-1], batch_R.shape[-1]) // 4 * 4
            batch_S, batch_R = batch_S[..., :h, :w], batch_R[..., :h, :w]

        for p in dis_params:
            p.requires_grad_(False)
        total, parts, (fake_R, fake_S) = total_loss(bundle, (batch_S, batch_R), cfg)
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        for p in dis_params:
            p.requires_grad_(True)
        _, d_r = adversarial_terms(bundle.D_R(batch_R), bundle.D_R(pool_R.query(fake_R)), cfg.adv_form)
        _, d_s = adversarial_terms(bundle.D_S(batch_S), bundle.D_S(pool_S.query(fake_S)), cfg.adv_form)
        opt_d.zero_grad()
        (d_r + d_s).backward()
        opt_d.step()

        row = {"step": step, **{k: v.item() for k, v in parts.items()}, "d_R": d_r.item(), "d_S": d_s.item()}
        bad = [k for k, v in row.items() if k != "step" and not math.isfinite(v)]
        if bad:
            raise GANDiverged(f"non-finite loss at step {step}: " +
                              ", ".join(f"{k}={row[k]}" for k in LOSS_COLUMNS[1:]))
        losses.append(row)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_bundle(out / "translator.pt", bundle, cfg, step + 1)
    for m in bundle.modules().values():
        m.eval()
    if out is not None:
        save_bundle(out / "translator.pt", bundle, cfg, cfg.steps)
        write_gan_csv(out / "gan_loss.csv", losses)
    return GANResult(bundle, losses)


def write_gan_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in losses:
            w.writerow([row["step"]] + [repr(row[k]) for k in LOSS_COLUMNS[1:]])


def save_bundle(path, bundle: TranslatorBundle, cfg: GANConfig, step: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "version": 1, "config": asdict(cfg), "step": int(step),
                "state_dict": bundle.state_dict()}, path)
    return path


def load_bundle(path):
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a translator checkpoint")
    cfg_d = dict(ckpt["config"])
    if cfg_d.get("crop") is not None:
        cfg_d["crop"] = tuple(cfg_d["crop"])
    cfg = GANConfig(**cfg_d)
    bundle = build_bundle(cfg)
    bundle.load_state_dict(ckpt["state_dict"])
    for m in bundle.modules().values():
        m.eval()
    return bundle, cfg


# ---- translation ----

@torch.no_grad()
def translate_image(generator: nn.Module, img: np.ndarray) -> np.ndarray:
    """Map one uint8 image through a generator at its native resolution."""
    if isinstance(generator, Identity):
        return np.array(img, dtype=np.uint8, copy=True)
    generator.eval()
    h, w = img.shape[:2]
    y = generator(_pad4(to_unit(img)[None]))[0, :, :h, :w]
    return from_unit(y)


def translate(generator: nn.Module, manifest, images=None, out_dir=None):
    """Translate every image; returns (manifest, images). Labels and metadata are copied as is.

    When ``out_dir`` is given the PNGs are written under the same relative paths.
    """
    from .core import save_manifest
    from .synthgen import load_png, save_png

    out_images = []
    for i, s in enumerate(manifest.samples):
        img = images[i] if images is not None else load_png(manifest.image_file(s))
        t = translate_image(generator, img)
        if out_dir is not None:
            save_png(t, Path(out_dir) / s.image_path)
        out_images.append(t)
    root = Path(out_dir) if out_dir is not None else manifest.root
    out = type(manifest)(manifest.samples, f"{manifest.dataset_name}_translated", manifest.generation_seed, root)
    if out_dir is not None:
        save_manifest(out, Path(out_dir) / "manifest.json")
    return out, out_images
