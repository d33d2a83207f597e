"""FCN / SFCN density regressors, supervised training and pretrain -> finetune."""
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

from .density import MaxDensityBound, density_for_sample, downsample_sum, DensityMap, pad_to_multiple, regularize_density
from .metrics import density_quality, mae, mse
from .synthgen import load_png

log = logging.getLogger(__name__)

STRIDE = 8
BACKBONES = ("tiny", "vgg16", "resnet101")
TABLE_DILATION = (512, 512, 512, 256, 128, 64)
TINY_DILATION = (128, 128, 128, 64, 64, 64)
BACKBONE_CHANNELS = {"tiny": 64, "vgg16": 512, "resnet101": 1024}
# per-channel input normalisation for uint8 RGB
PIXEL_MEAN = (0.45, 0.45, 0.45)
PIXEL_STD = (0.25, 0.25, 0.25)
CHECKPOINT_FORMAT = "crowdsim-counter"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "tiny"
    use_dilation_block: bool = True
    use_spatial_encoder: bool = True
    encoder_channels: int = 64
    output_upsample: int = STRIDE
    dilation_channels: Optional[tuple] = None  # None: table widths, narrowed for tiny
    supervise_scale: str = "full"  # "full" (after x8 upsample) or "low" (1/8 map)
    mass_preserving_upsample: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.supervise_scale not in ("full", "low"):
            raise ConfigError("supervise_scale must be 'full' or 'low'")
        if self.output_upsample != STRIDE:
            raise ConfigError("output_upsample must equal the backbone stride of 8")
        if self.dilation_channels is None:
            self.dilation_channels = TINY_DILATION if self.backbone == "tiny" else TABLE_DILATION
        self.dilation_channels = tuple(int(c) for c in self.dilation_channels)
        if self.use_spatial_encoder and self.head_in_channels != self.encoder_channels:
            raise ConfigError(
                f"spatial encoder expects {self.encoder_channels} input channels, "
                f"got {self.head_in_channels}")

    @property
    def head_in_channels(self) -> int:
        if self.use_dilation_block:
            return self.dilation_channels[-1]
        return BACKBONE_CHANNELS[self.backbone]

    @property
    def variant(self) -> str:
        if not self.use_dilation_block and not self.use_spatial_encoder:
            return "FCN"
        if self.use_dilation_block and self.use_spatial_encoder:
            return {"vgg16": "SFCN", "resnet101": "SFCN†", "tiny": "tiny-SFCN"}[self.backbone]
        return "custom"


def model_config(name: str, backbone: Optional[str] = None, **kw) -> ModelConfig:
    """Named presets: fcn, sfcn, sfcn_dagger, tiny (tiny-SFCN)."""
    name = name.lower().replace("-", "_").replace("†", "_dagger")
    if name in ("tiny", "tiny_sfcn"):
        return ModelConfig("tiny", True, True, **kw)
    if name == "fcn":
        return ModelConfig(backbone or "vgg16", False, False, **kw)
    if name == "sfcn":
        return ModelConfig(backbone or "vgg16", True, True, **kw)
    if name in ("sfcn_dagger", "sfcn_plus"):
        return ModelConfig(backbone or "resnet101", True, True, **kw)
    raise ConfigError(f"unknown model preset {name!r}")


def _conv(cin, cout, k=3, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation)


def tiny_backbone() -> nn.Sequential:
    layers = []
    cin = 3
    for cout in (32, 64, 64):
        layers += [_conv(cin, cout, stride=2), nn.ReLU(inplace=True), _conv(cout, cout), nn.ReLU(inplace=True)]
        cin = cout
    return nn.Sequential(*layers)


def vgg16_backbone() -> nn.Sequential:
    """VGG-16 conv1_1 .. conv4_3 (three pools, stride 8)."""
    layers = []
    cin = 3
    for i, (cout, reps) in enumerate(((64, 2), (128, 2), (256, 3), (512, 3))):
        for _ in range(reps):
            layers += [_conv(cin, cout), nn.ReLU(inplace=True)]
            cin = cout
        if i < 3:
            layers.append(nn.MaxPool2d(2, 2))
    return nn.Sequential(*layers)


def resnet101_backbone() -> nn.Sequential:
    """ResNet-101 up to conv4_x with conv4_x stride set to 1 (stride 8 overall)."""
    from torchvision.models import resnet101

    net = resnet101(weights=None)
    layer3 = net.layer3
    layer3[0].conv2.stride = (1, 1)
    layer3[0].downsample[0].stride = (1, 1)
    return nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, layer3)


def dilation_block(cin: int, widths) -> nn.Sequential:
    layers = []
    for cout in widths:
        layers += [_conv(cin, cout, dilation=2), nn.ReLU(inplace=True)]
        cin = cout
    return nn.Sequential(*layers)


DIRECTIONS = ("down", "up", "left_to_right", "right_to_left")


def directional_pass(x: torch.Tensor, conv: nn.Module, direction: str) -> torch.Tensor:
    """Slice-recurrent message passing along one direction.

    Slice i becomes ``x_i + relu(conv(out_{i-1}))`` where ``out_{i-1}`` is
    the already-updated neighbouring slice in the pass direction.
    """
    dim = 2 if direction in ("down", "up") else 3
    slices = list(x.split(1, dim=dim))
    order = range(len(slices)) if direction in ("down", "left_to_right") else range(len(slices) - 1, -1, -1)
    out = [None] * len(slices)
    prev = None
    for i in order:
        out[i] = slices[i] if prev is None else slices[i] + F.relu(conv(out[prev]))
        prev = i
    return torch.cat(out, dim=dim)


class SpatialEncoder(nn.Module):
    """Four sequential passes: down, up, left-to-right, right-to-left."""

    def __init__(self, channels: int = 64, kernel: int = 9):
        super().__init__()
        self.channels = channels
        pad = kernel // 2
        self.convs = nn.ModuleDict({
            "down": nn.Conv2d(channels, channels, (1, kernel), padding=(0, pad), bias=False),
            "up": nn.Conv2d(channels, channels, (1, kernel), padding=(0, pad), bias=False),
            "left_to_right": nn.Conv2d(channels, channels, (kernel, 1), padding=(pad, 0), bias=False),
            "right_to_left": nn.Conv2d(channels, channels, (kernel, 1), padding=(pad, 0), bias=False),
        })

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"spatial encoder expects {self.channels} channels, got {x.shape[1]}")
        for d in DIRECTIONS:
            x = directional_pass(x, self.convs[d], d)
        return x


class CrowdCounter(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = {"tiny": tiny_backbone, "vgg16": vgg16_backbone,
                         "resnet101": resnet101_backbone}[config.backbone]()
        cin = BACKBONE_CHANNELS[config.backbone]
        self.dilation = dilation_block(cin, config.dilation_channels) if config.use_dilation_block else None
        self.encoder = SpatialEncoder(config.encoder_channels) if config.use_spatial_encoder else None
        self.regression = nn.Conv2d(config.head_in_channels, 1, 1)
        init_weights(self)

    def forward_low(self, x):
        """Density at 1/8 of the input size, after the final ReLU."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"input {h}x{w} is not divisible by {STRIDE}")
        f = self.backbone(x)
        if self.dilation is not None:
            f = self.dilation(f)
        if self.encoder is not None:
            f = self.encoder(f)
        return F.relu(self.regression(f))

    def upsample(self, low):
        up = F.interpolate(low, scale_factor=STRIDE, mode="nearest")
        if self.config.mass_preserving_upsample:
            up = up / (STRIDE * STRIDE)
        return up

    def forward(self, x):
        return self.upsample(self.forward_low(x))


def init_weights(model: "CrowdCounter", std: float = 0.01) -> None:
    """He-normal hidden convs, N(0, std) encoder, half-normal regression head, zero biases."""
    small = set()
    for part in (getattr(model, "encoder", None), getattr(model, "regression", None)):
        if part is not None:
            small.update(id(m) for m in part.modules())
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            if id(m) in small:
                nn.init.normal_(m.weight, 0.0, std)
            else:
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    # head inputs are post-ReLU, so nonnegative weights keep the final ReLU live at start
    reg = getattr(model, "regression", None)
    if reg is not None:
        with torch.no_grad():
            reg.weight.abs_().mul_(0.1)


def build_model(config: ModelConfig, seed: Optional[int] = None) -> CrowdCounter:
    if seed is not None:
        torch.manual_seed(seed)
    return CrowdCounter(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def spatial_encode(encoder: SpatialEncoder, features: torch.Tensor) -> torch.Tensor:
    return encoder(features)


# ---- data ----

def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)
    mean = torch.tensor(PIXEL_MEAN).view(3, 1, 1)
    std = torch.tensor(PIXEL_STD).view(3, 1, 1)
    return (x - mean) / std


class DensityDataset:
    """Images and density targets held in memory, zero-padded to a multiple of 8."""

    def __init__(self, manifest, sigma: float = 4.0, scale: str = "full", images=None):
        self.manifest = manifest
        self.images = []
        self.targets = []
        self.counts = []
        self.sizes = []
        for i, s in enumerate(manifest.samples):
            img = images[i] if images is not None else load_png(manifest.image_file(s))
            x = image_to_tensor(np.pad(img, ((0, (-img.shape[0]) % STRIDE), (0, (-img.shape[1]) % STRIDE), (0, 0))))
            dm = pad_to_multiple(density_for_sample(s, sigma).grid, STRIDE)
            if scale == "low":
                dm = downsample_sum(DensityMap(dm), STRIDE).grid
            self.images.append(x)
            self.targets.append(torch.from_numpy(dm.astype(np.float32))[None])
            self.counts.append(float(s.count))
            self.sizes.append((s.height, s.width))

    def __len__(self):
        return len(self.images)


def batch_indices(seed: int, step: int, n: int, batch_size: int):
    """Epoch-wise shuffled indices for one step; a pure function of (seed, step)."""
    out = []
    for b in range(batch_size):
        p = step * batch_size + b
        perm = np.random.default_rng([seed, p // n]).permutation(n)
        out.append(int(perm[p % n]))
    return out


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-5
    batch_size: int = 1
    seed: int = 0
    sigma: float = 4.0
    crop: Optional[tuple] = None  # (h, w), multiples of 8
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    target_scale: float = 1.0  # multiply density targets (predictions are divided back)


@dataclass
class TrainResult:
    model: CrowdCounter
    losses: list = field(default_factory=list)
    step: int = 0


def _crop(x, y, crop, rng, scale_div):
    ch, cw = crop
    h, w = x.shape[-2:]
    if ch > h or cw > w:
        return x, y
    i = int(rng.integers(0, (h - ch) // STRIDE + 1)) * STRIDE
    j = int(rng.integers(0, (w - cw) // STRIDE + 1)) * STRIDE
    x = x[:, i:i + ch, j:j + cw]
    y = y[:, i // scale_div:(i + ch) // scale_div, j // scale_div:(j + cw) // scale_div]
    return x, y


def _batch(data: DensityDataset, ids, cfg: TrainConfig, step: int, scale_div: int):
    xs, ys = [], []
    for b, i in enumerate(ids):
        x, y = data.images[i], data.targets[i]
        if cfg.crop is not None:
            x, y = _crop(x, y, cfg.crop, np.random.default_rng([cfg.seed, step, b, 1]), scale_div)
        xs.append(x)
        ys.append(y)
    return torch.stack(xs), torch.stack(ys) * cfg.target_scale


def train_supervised(model: CrowdCounter, manifest, cfg: TrainConfig, out_dir=None, data=None,
                     resume_from=None) -> TrainResult:
    """Adam on pixel-wise MSE between predicted and target density maps."""
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    scale = model.config.supervise_scale
    data = data or DensityDataset(manifest, cfg.sigma, scale)
    scale_div = STRIDE if scale == "low" else 1
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: list = []
    start = 0
    if resume_from is not None:
        ckpt = torch.load(resume_from, weights_only=False)
        model.load_state_dict(ckpt["state_dict"])
        if ckpt.get("optimizer") is not None:
            opt.load_state_dict(ckpt["optimizer"])
        start = int(ckpt["step"])
        losses = list(ckpt.get("losses", []))
    torch.manual_seed(cfg.seed)
    model.train()
    out = Path(out_dir) if out_dir is not None else None
    for step in range(start, cfg.steps):
        ids = batch_indices(cfg.seed, step, len(data), cfg.batch_size)
        x, y = _batch(data, ids, cfg, step, scale_div)
        pred = model.forward_low(x) if scale == "low" else model(x)
        loss = F.mse_loss(pred, y)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step} (lr={cfg.lr}, batch ids={ids})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.pt", model, step + 1, cfg.seed, opt, losses)
    model.eval()
    if out is not None:
        save_checkpoint(out / "checkpoint.pt", model, max(cfg.steps, start), cfg.seed, opt, losses)
        write_loss_csv(out / "loss.csv", losses)
    return TrainResult(model, losses, max(cfg.steps, start))


def write_loss_csv(path, losses, start: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for k, v in enumerate(losses):
            w.writerow([start + k, repr(float(v))])


def save_checkpoint(path, model: CrowdCounter, step: int, seed: int, optimizer=None, losses=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "step": int(step),
        "seed": int(seed),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "losses": list(losses or []),
    }, path)
    return path


def load_checkpoint(path):
    """Return (model, header) where header holds config, step and seed."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint {path} does not exist")
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a counter checkpoint")
    cfg = dict(ckpt["config"])
    cfg["dilation_channels"] = tuple(cfg["dilation_channels"])
    model = CrowdCounter(ModelConfig(**cfg))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, {k: ckpt[k] for k in ("config", "step", "seed", "version")}


# ---- inference and evaluation ----

@torch.no_grad()
def predict_density(model: CrowdCounter, img: np.ndarray, target_scale: float = 1.0) -> np.ndarray:
    """Full-resolution density for a uint8 RGB image (padding cropped away)."""
    model.eval()
    h, w = img.shape[:2]
    padded = np.pad(img, ((0, (-h) % STRIDE), (0, (-w) % STRIDE), (0, 0)))
    out = model(image_to_tensor(padded)[None])[0, 0].double().numpy() / target_scale
    return out[:h, :w]


def evaluate_predictions(preds, gts, bound: Optional[MaxDensityBound] = None) -> dict:
    """Count and density-quality metrics; PSNR/SSIM means skip infinite PSNR."""
    if bound is not None:
        preds = [regularize_density(p, bound) for p in preds]
    pc = [float(p.sum()) for p in preds]
    gc = [float(g.sum()) for g in gts]
    psnrs, ssims = [], []
    n_inf = 0
    for p, g in zip(preds, gts):
        ps, ss = density_quality(p, g)
        if math.isinf(ps):
            n_inf += 1
            continue
        psnrs.append(ps)
        ssims.append(ss)
    return {
        "mae": mae(pc, gc),
        "mse": mse(pc, gc),
        "psnr_mean": float(np.mean(psnrs)) if psnrs else math.inf,
        "ssim_mean": float(np.mean(ssims)) if ssims else 1.0,
        "n": len(pc),
        "n_inf": n_inf,
        "pred_counts": pc,
        "gt_counts": gc,
    }


def evaluate_model(model: CrowdCounter, manifest, bound: Optional[MaxDensityBound] = None,
                   sigma: float = 4.0, target_scale: float = 1.0, images=None) -> dict:
    preds, gts = [], []
    for i, s in enumerate(manifest.samples):
        img = images[i] if images is not None else load_png(manifest.image_file(s))
        preds.append(predict_density(model, img, target_scale))
        gts.append(density_for_sample(s, sigma).grid)
    return evaluate_predictions(preds, gts, bound)


def pretrain_finetune(config: ModelConfig, synthetic, real, pre_cfg: TrainConfig, fine_cfg: TrainConfig,
                      out_dir, seed: int = 0) -> TrainResult:
    """Train on synthetic data, then continue every parameter on the second manifest."""
    if len(synthetic) == 0 or len(real) == 0:
        raise ValueError("both manifests must be nonempty")
    out = Path(out_dir)
    model = build_model(config, seed)
    train_supervised(model, synthetic, pre_cfg, out / "pretrain")
    return finetune(out / "pretrain" / "checkpoint.pt", real, fine_cfg, out / "finetune")


def finetune(checkpoint, manifest, cfg: TrainConfig, out_dir=None) -> TrainResult:
    model, _ = load_checkpoint(checkpoint)
    for p in model.parameters():
        p.requires_grad_(True)
    return train_supervised(model, manifest, cfg, out_dir)
