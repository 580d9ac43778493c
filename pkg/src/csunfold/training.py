"""Desk-scale training: patch streaming with augmentation, Adam with bias
correction, gradient clipping, a halving learning-rate schedule and
per-epoch checkpoints.

Measurements are generated on the fly from the current sampling matrix,
which is what makes joint matrix/network optimization possible; with a
frozen matrix it is merely redundant work at desk scale.

Single-threaded runs are the reproducibility reference: given (seed,
config) the whole optimization is bit-reproducible.  Parameter mutation
happens only inside the optimizer step.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as md
from . import sampling
from .pgm import read_image

CLIP_NORM = 10.0


@dataclass
class TrainConfig:
    data_dir: str = ""
    crop: int = 99
    batch: int = 16
    lr: float = 1e-4
    halve_every: int = 30
    epochs: int = 1
    iters_per_epoch: int = 100
    seed: int = 0
    learn_phi: bool = False
    model: md.ModelConfig = field(default_factory=md.ModelConfig)

    def __post_init__(self):
        if self.crop % self.model.block_size:
            raise ValueError(
                f"crop {self.crop} must be a multiple of the block size {self.model.block_size}"
            )
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


def desk_train_config(**overrides):
    """Small profile: 3 phases, 8 channels, one FEB, 33-pixel crops."""
    cfg = TrainConfig(crop=33, batch=2, model=md.desk_config())
    return replace(cfg, **overrides) if overrides else cfg


_CONFIG_KEYS = {
    "data_dir": str,
    "crop": int,
    "batch": int,
    "lr": float,
    "halve_every": int,
    "epochs": int,
    "iters_per_epoch": int,
    "seed": int,
    "learn_phi": lambda s: s.lower() in ("1", "true", "yes"),
}
_MODEL_KEYS = {
    "phases": int,
    "block_size": int,
    "rate": float,
    "channels": int,
    "feb_blocks": int,
    "patch_size": int,
    "ssg_variant": str,
    "nl_kind": str,
    "nl_subsample": int,
    "model_seed": int,
}


def parse_train_config(path):
    """Read a plain key=value file; unknown keys are rejected."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()

    cfg_kwargs = {}
    model_kwargs = {}
    for key, value in raw.items():
        if key in _CONFIG_KEYS:
            cfg_kwargs[key] = _CONFIG_KEYS[key](value)
        elif key in _MODEL_KEYS:
            target = "seed" if key == "model_seed" else key
            model_kwargs[target] = _MODEL_KEYS[key](value)
        else:
            raise ValueError(f"{path}: unknown configuration key {key!r}")
    return TrainConfig(model=md.ModelConfig(**model_kwargs), **cfg_kwargs)


# ---------------------------------------------------------------------------
# data


def load_and_augment(data_dir, crop, seed):
    """Endless stream of augmented crop x crop patches in [0, 1].

    Each draw picks an image, a random crop, one of the four right-angle
    rotations, and independent horizontal/vertical flips.  Deterministic
    given the seed.  Undersized images are skipped with a warning; a
    directory with no usable image is an error.
    """
    paths = sorted(p for p in Path(data_dir).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    images = []
    for p in paths:
        img = read_image(p)
        if img.shape[0] < crop or img.shape[1] < crop:
            warnings.warn(f"skipping {p.name}: {img.shape[0]}x{img.shape[1]} smaller than crop {crop}")
            continue
        images.append(img)
    if not images:
        raise ValueError(f"no usable images (>= {crop}x{crop}) in {data_dir!r}")

    def stream():
        rng = np.random.default_rng(seed)
        while True:
            yield augment_patch(images[rng.integers(len(images))], crop, rng)

    return stream()


def augment_patch(image, crop, rng):
    h, w = image.shape
    top = rng.integers(h - crop + 1)
    left = rng.integers(w - crop + 1)
    patch = image[top:top + crop, left:left + crop]
    patch = np.rot90(patch, k=int(rng.integers(4)))
    if rng.integers(2):
        patch = patch[:, ::-1]
    if rng.integers(2):
        patch = patch[::-1, :]
    return np.ascontiguousarray(patch)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(named_params, state, lr):
    """Standard bias-corrected update; in-place on parameter data."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def clip_gradients(params, max_norm=CLIP_NORM):
    """Global L2-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def lr_at_epoch(base_lr, epoch, halve_every):
    return base_lr * 0.5 ** (epoch // halve_every)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: md.ModelParams
    op: sampling.SamplingOperator
    losses: list
    checkpoint: str | None
    curve: str | None


def _training_step(params, model_cfg, op, batch_imgs, trainable, adam, lr):
    # one stacked forward over the whole batch; batch norm therefore sees
    # batch statistics
    x = ad.Tensor(np.stack([img for img in batch_imgs])[:, None].astype(np.float32))
    y = sampling.sample_tensor(op, x)
    xs, _, _ = md.forward(params, model_cfg, op, y, training=True)
    total = md.loss(xs, x)
    value = total.item()
    ad.backward(total)
    clip_gradients([p for _, p in trainable])
    adam_step(trainable, adam, lr)
    for _, p in trainable:
        p.zero_grad()
    return value


def _trainable(params, op, learn_phi):
    named = params.named_parameters()
    if learn_phi:
        named = [(md.PHI_TENSOR_NAME, op.phi)] + named
    return named


def train(cfg, out_dir, patches=None):
    """Run the configured optimization; writes per-epoch checkpoints and a
    loss curve CSV (header step,epoch,lr,loss).

    ``patches`` bypasses the data directory with a fixed list of arrays
    (used by the overfitting checks).  A non-finite loss aborts, keeping
    the last good checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    op = sampling.make_operator(
        cfg.model.block_size,
        cfg.model.rate,
        kind="learned-init" if cfg.learn_phi else "orthogonalized-random",
        seed=cfg.seed,
    )
    params = md.init_parameters(cfg.model, seed=cfg.model.seed)
    trainable = _trainable(params, op, cfg.learn_phi)
    adam = AdamState()

    if patches is None:
        stream = load_and_augment(cfg.data_dir, cfg.crop, cfg.seed)
        next_batch = lambda: [next(stream) for _ in range(cfg.batch)]
    else:
        fixed = [np.asarray(p, dtype=np.float64) for p in patches]
        next_batch = lambda: [fixed[i] for i in rng.choice(len(fixed), size=min(cfg.batch, len(fixed)), replace=False)]

    curve_path = out / "loss_curve.csv"
    ckpt_path = out / "checkpoint.dcsw"
    losses = []
    step = 0
    wrote_checkpoint = False
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss"])
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg.lr, epoch, cfg.halve_every)
            for _ in range(cfg.iters_per_epoch):
                value = _training_step(params, cfg.model, op, next_batch(), trainable, adam, lr)
                if not np.isfinite(value):
                    fh.flush()
                    if not wrote_checkpoint:
                        md.save_checkpoint(ckpt_path, cfg.model, params, op)
                    raise FloatingPointError(
                        f"training loss became non-finite at step {step}; kept {ckpt_path}"
                    )
                losses.append(value)
                writer.writerow([step, epoch, f"{lr:.8g}", f"{value:.10g}"])
                step += 1
            md.save_checkpoint(ckpt_path, cfg.model, params, op)
            wrote_checkpoint = True
    if cfg.epochs == 0 or not wrote_checkpoint:
        md.save_checkpoint(ckpt_path, cfg.model, params, op)
    return TrainResult(params, op, losses, str(ckpt_path), str(curve_path))


def overfit(patches, model_cfg, steps, lr=1e-4, seed=0, learn_phi=False, op=None, callback=None):
    """Full-batch optimization on a fixed patch set; returns (params, op, losses).

    The compact workhorse behind the learnability and ablation checks:
    every step sees all patches, no schedule, no files.
    """
    if op is None:
        op = sampling.make_operator(
            model_cfg.block_size,
            model_cfg.rate,
            kind="learned-init" if learn_phi else "orthogonalized-random",
            seed=seed,
        )
    params = md.init_parameters(model_cfg, seed=seed)
    trainable = _trainable(params, op, learn_phi)
    adam = AdamState()
    fixed = [np.asarray(p, dtype=np.float64) for p in patches]
    losses = []
    for step in range(steps):
        value = _training_step(params, model_cfg, op, fixed, trainable, adam, lr)
        if not np.isfinite(value):
            raise FloatingPointError(f"overfit loss became non-finite at step {step}")
        losses.append(value)
        if callback is not None and callback(step, value, params, op):
            break
    return params, op, losses
