"""L1 training with Adam, a step learning-rate schedule, patch sampling and a finite-difference gradient check."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .config import ModelConfig
from .image import ImageBuffer, augment, crop_to_multiple, degrade_bicubic, load_image, to_tensor
from .model import build, forward
from .params import ParameterStore
from .prior import VggSlice, extract_prior_tensor, random_vgg
from .tensor import Tensor, deterministic, no_grad, precision


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    halving_epochs: int = 200
    patch: int = 64  # LR patch side; the HR patch is patch * scale
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    deterministic: bool = False

    def __post_init__(self):
        for name in ("lr0", "halving_epochs", "patch", "batch_size", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def l1_loss(sr: Tensor, hr) -> Tensor:
    """Mean absolute error over every element."""
    if sr.shape != hr.shape:
        raise ValueError(f"dims differ: {sr.shape} vs {hr.shape}")
    return ops.mean(ops.abs(sr - hr))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 0.5 ** (epoch // cfg.halving_epochs)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParameterStore, state: AdamState, lr: float, cfg: Optional[TrainConfig] = None,
              grads: Optional[Mapping[str, np.ndarray]] = None) -> AdamState:
    """One bias-corrected Adam update of every trainable tensor, in place.

    Gradients come from ``grads`` when given, otherwise from each tensor's
    ``.grad`` (a missing gradient counts as zero). Frozen tensors are skipped
    and never enter the state.
    """
    cfg = cfg or TrainConfig()
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.trainable():
        g = grads.get(name) if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".pnm")


@dataclass
class Corpus:
    """HR images with their bicubic LR counterparts, prepared once."""

    hr: List[ImageBuffer]
    lr: List[ImageBuffer]
    scale: int
    names: List[str] = field(default_factory=list)

    @classmethod
    def from_images(cls, images: Sequence[ImageBuffer], scale: int, names=None) -> "Corpus":
        hr = [_as_rgb(crop_to_multiple(im, scale)) for im in images]
        return cls(hr, [degrade_bicubic(im, scale) for im in hr], scale, list(names or []))

    def __len__(self) -> int:
        return len(self.hr)


def _as_rgb(img: ImageBuffer) -> ImageBuffer:
    return img if img.channels == 3 else ImageBuffer.from_array(np.repeat(img.data, 3, axis=2))


def list_images(directory) -> List[str]:
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))


def load_corpus(directory, scale: int) -> Corpus:
    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no images in {directory}")
    return Corpus.from_images([load_image(p) for p in paths], scale, [os.path.basename(p) for p in paths])


def sample_batch(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> Tuple[Tensor, Tensor]:
    """Random aligned LR/HR patches with one shared rotation/flip draw per pair."""
    p, r = cfg.patch, corpus.scale
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(len(corpus)))
        lr_img, hr_img = corpus.lr[i], corpus.hr[i]
        if lr_img.height < p or lr_img.width < p:
            raise ValueError(f"LR image {i} ({lr_img.width}x{lr_img.height}) smaller than patch {p}")
        y, x = int(rng.integers(lr_img.height - p + 1)), int(rng.integers(lr_img.width - p + 1))
        lr_patch = ImageBuffer.from_array(lr_img.data[y:y + p, x:x + p])
        hr_patch = ImageBuffer.from_array(hr_img.data[y * r:(y + p) * r, x * r:(x + p) * r])
        hr_patch, lr_patch = augment(hr_patch, lr_patch, rng)
        lrs.append(to_tensor(lr_patch, dtype).data)
        hrs.append(to_tensor(hr_patch, dtype).data)
    return Tensor(np.concatenate(lrs)), Tensor(np.concatenate(hrs))


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def default_vgg(config: ModelConfig, seed: int = 0, dtype=np.float32) -> VggSlice:
    """Narrow fixed-seed extractor whose output width matches ``config.prior_channels``."""
    w = min(config.prior_channels, 64)
    return random_vgg(seed, (w, w, w, config.prior_channels), dtype)


@dataclass
class GradCheckReport:
    tolerance: float
    errors: Dict[str, float]
    checked: Dict[str, int]
    refined: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures()

    def failures(self) -> List[str]:
        return [k for k, e in self.errors.items() if not (math.isfinite(e) and e <= self.tolerance)]

    def lines(self) -> List[str]:
        out = []
        for k, e in self.errors.items():
            tag = "ok  " if math.isfinite(e) and e <= self.tolerance else "FAIL"
            extra = f", {self.refined[k]} refined" if self.refined.get(k) else ""
            out.append(f"{tag} {k}: max rel err {e:.3e} ({self.checked[k]} entries{extra})")
        return out


# Gradients below this magnitude are compared on an absolute scale: float64
# central differences of an O(1) loss carry roughly 1e-10 of roundoff.
GRAD_FLOOR = 1e-6
# Step divisors tried when the h-stencil straddles a ReLU/abs/max switch point.
REFINE = (10.0, 100.0)


def relative_error(a, b, floor: float = GRAD_FLOOR) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _central(loss: Callable[[], Tensor], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = loss().item()
    flat[i] = orig - h
    down = loss().item()
    flat[i] = orig
    return (up - down) / (2.0 * h)


def grad_check(config: ModelConfig, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0, size: int = 8,
               max_entries: Optional[int] = None, params: Optional[ParameterStore] = None) -> GradCheckReport:
    """Compare backprop gradients of the L1 loss with central differences, in float64.

    ``max_entries`` caps how many randomly chosen entries of each tensor are
    perturbed; ``None`` checks them all. An entry over tolerance at step ``h``
    is retried at ``h/10`` and ``h/100``: the loss is only piecewise smooth,
    and a stencil that straddles a switch point is not a valid oracle there.
    A wrong backward rule stays wrong at every step size. The frozen
    extractor supplies the prior and never appears in the report.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        params = params.astype(np.float64) if params is not None else build(config, seed, np.float64)
        lr = Tensor(rng.random((1, 3, size, size)))
        hr = Tensor(rng.random((1, 3, size * config.scale, size * config.scale)))
        prior = None
        if config.injection_indices:
            prior = extract_prior_tensor(lr, default_vgg(config, seed, np.float64))

        def loss() -> Tensor:
            return l1_loss(forward(lr, prior, params, config), hr)

        params.zero_grad()
        loss().backward()
        errors, checked, refined = {}, {}, {}
        for name, p in params.trainable():
            analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
            worst, n_refined = 0.0, 0
            with no_grad():
                for i in idx:
                    err = float(relative_error(analytic[i], _central(loss, flat, i, h)))
                    if err > tolerance:
                        n_refined += 1
                        for d in REFINE:
                            err = min(err, float(relative_error(analytic[i], _central(loss, flat, i, h / d))))
                    worst = max(worst, err)
            errors[name], checked[name], refined[name] = worst, int(idx.size), n_refined
    return GradCheckReport(tolerance, errors, checked, refined)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class LogRecord:
    step: int
    epoch: int
    lr: float
    loss: float

    def line(self) -> str:
        return f"step {self.step}  epoch {self.epoch}  lr {self.lr:.3e}  loss {self.loss:.6f}"


def _prior_for(lr: Tensor, vgg: Optional[VggSlice], config: ModelConfig):
    if not config.injection_indices:
        return None
    if vgg is None:
        raise ValueError("config injects semantic priors; an extractor is required")
    return extract_prior_tensor(lr, vgg)


def train(params: ParameterStore, config: ModelConfig, corpus: Corpus, cfg: TrainConfig,
          vgg: Optional[VggSlice] = None, log: Optional[Callable[[LogRecord], None]] = None) -> dict:
    """Run ``cfg.steps`` Adam steps on random patches; returns a JSON-ready summary.

    An epoch is one pass worth of patches over the corpus, i.e.
    ``ceil(len(corpus) / batch_size)`` steps.
    """
    if corpus.scale != config.scale:
        raise ValueError(f"corpus scale {corpus.scale} != model scale {config.scale}")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    steps_per_epoch = max(1, math.ceil(len(corpus) / cfg.batch_size))
    dtype = params[params.names()[0]].dtype if len(params) else np.float32
    records: List[LogRecord] = []
    with deterministic(cfg.deterministic), precision(dtype):
        for step in range(cfg.steps):
            epoch = step // steps_per_epoch
            lr_batch, hr_batch = sample_batch(corpus, cfg, rng, dtype)
            loss = l1_loss(forward(lr_batch, _prior_for(lr_batch, vgg, config), params, config), hr_batch)
            params.zero_grad()
            loss.backward()
            rate = lr_at(epoch, cfg)
            adam_step(params, state, rate, cfg)
            rec = LogRecord(step + 1, epoch, rate, loss.item())
            records.append(rec)
            if log is not None:
                log(rec)
    return {
        "steps": cfg.steps,
        "epochs": (cfg.steps + steps_per_epoch - 1) // steps_per_epoch,
        "initial_loss": records[0].loss if records else None,
        "final_loss": records[-1].loss if records else None,
        "train_config": asdict(cfg),
        "model_config": config.to_dict(),
    }


def overfit_smoke(pair: Tuple[ImageBuffer, ImageBuffer], steps: int = 200, lr: float = 1e-3,
                  config: Optional[ModelConfig] = None, seed: int = 0) -> List[float]:
    """Fit one ``(lr_image, hr_image)`` pair; returns ``steps + 1`` losses, the first before any update."""
    lr_img, hr_img = pair
    config = config or ModelConfig.tiny(scale=hr_img.width // lr_img.width)
    params = build(config, seed)
    vgg = default_vgg(config, seed)
    cfg = TrainConfig(lr0=lr, seed=seed)
    x, y = to_tensor(_as_rgb(lr_img)), to_tensor(_as_rgb(hr_img))
    prior = _prior_for(x, vgg, config)
    state = AdamState()
    losses = []
    with deterministic():
        for i in range(steps + 1):
            loss = l1_loss(forward(x, prior, params, config), y)
            losses.append(loss.item())
            if i == steps:
                break
            params.zero_grad()
            loss.backward()
            adam_step(params, state, lr_at(0, cfg), cfg)
    return losses


def dump_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
