"""Training loop, Adam optimizer, evaluation, and prediction."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import (Dataset, ManifestRecord, expand_4x, load_image,
                   nearest_resize, resize_image, save_mask)
from .engine import GradTape, Tensor, gradcheck
from .errors import ContractError, NonFiniteGradientError, NonFiniteLossError
from .loss_metrics import combined_loss, metrics_from_counts, segmentation_metrics
from .network import Model, NetworkConfig, save_checkpoint


@dataclass
class TrainConfig:
    """Optimization recipe. Defaults follow the reference setup: Adam at
    3e-4 decayed by 10x every 20 epochs, batch 16, 250 epochs, 224px
    working resolution, 4x offline augmentation."""

    epochs: int = 250
    batch_size: int = 16
    lr: float = 3e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    image_size: int = 224
    seed: int = 0
    augment: bool = True
    dice_smooth: float = 1.0
    focal_gamma: float = 2.0
    focal_eps: float = 1e-7

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate for a zero-based epoch index."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


class Adam:
    """Adam with bias correction, one slot pair per trainable parameter."""

    def __init__(self, model: Model, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.slots = {
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in model.store.trainable()
        }

    def step(self, model: Model, grads: dict, lr: float) -> None:
        """Apply one update from a tape gradient map (tensor uid -> array).

        Every trainable parameter must have a finite gradient; a missing
        entry means the forward graph is wired wrong, so it raises.
        """
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, tensor in model.store.trainable():
            g = grads.get(tensor.uid)
            if g is None:
                raise ContractError(f"no gradient reached parameter {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name} at step {self.t}"
                )
            m, v = self.slots[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            tensor.data -= update.astype(tensor.dtype, copy=False)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    model: Model
    history: list
    checkpoint_path: Path
    n_samples: int


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train(records: Sequence[ManifestRecord], net_config: NetworkConfig,
          cfg: TrainConfig, out_dir,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train a fresh model on the manifest records.

    Augmentation (when enabled) is materialized once into
    out_dir/augmented before training. Every epoch reshuffles with a
    generator seeded by (seed, epoch), so runs are reproducible and
    resumable research code can replay any epoch order. The final weights
    land in out_dir/model.ckpt and the loss curve in out_dir/history.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.augment:
        records = expand_4x(records, out_dir / "augmented", cfg.seed)
    ds = Dataset(records, cfg.image_size)
    model = Model(net_config, seed=cfg.seed)
    opt = Adam(model, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[EpochLog] = []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        perm = rng.permutation(len(ds))
        loss_sum = 0.0
        n_batches = 0
        for idx in _batches(len(ds), cfg.batch_size, perm):
            imgs = np.stack([ds.load(i)[0] for i in idx])
            masks = np.stack([ds.load(i)[1] for i in idx])
            x = Tensor(imgs)
            y = Tensor(masks)
            with GradTape() as tape:
                pred = model.forward(x, training=True)
                loss = combined_loss(pred, y, cfg.dice_smooth,
                                     cfg.focal_gamma, cfg.focal_eps)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"loss became {value} at epoch {epoch}, step {n_batches}"
                )
            grads = tape.backward(loss)
            opt.step(model, grads, lr)
            loss_sum += value
            n_batches += 1
        log = EpochLog(epoch=epoch, loss=loss_sum / max(1, n_batches), lr=lr,
                       seconds=time.perf_counter() - t0)
        history.append(log)
        if on_epoch is not None:
            on_epoch(log)

    ckpt = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt, meta={
        "train_config": cfg.to_dict(),
        "epochs_run": cfg.epochs,
        "final_loss": history[-1].loss if history else None,
        "n_samples": len(ds),
    })
    with open(out_dir / "history.json", "w") as f:
        json.dump([asdict(h) for h in history], f, indent=2)
    return TrainResult(model=model, history=history, checkpoint_path=ckpt,
                       n_samples=len(ds))


# ---------------------------------------------------------------------------
# evaluation and prediction


def predict_probabilities(model: Model, images: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass on a (B, C, S, S) batch; no tape, no
    running-stat drift."""
    return model.forward(Tensor(images), training=False).data


def evaluate(model: Model, records: Sequence[ManifestRecord], image_size: int,
             threshold: float = 0.5, batch_size: int = 8) -> dict:
    """Score a model against manifest ground truth.

    Predictions are made at the working resolution and resized back to
    each mask's native size with nearest neighbor before thresholding.
    Returns per-image metrics plus an aggregate over pooled confusion
    counts.
    """
    ds = Dataset(records, image_size)
    per_image = []
    totals = np.zeros(4, dtype=np.int64)
    order = np.arange(len(ds))
    for idx in _batches(len(ds), batch_size, order):
        imgs = np.stack([ds.load(i)[0] for i in idx])
        probs = predict_probabilities(model, imgs)
        for row, i in enumerate(idx):
            truth = ds.original_mask(int(i))[0]
            up = nearest_resize(probs[row, 0], truth.shape[0], truth.shape[1])
            rep = segmentation_metrics(up, truth, threshold)
            totals += (rep.tp, rep.fp, rep.tn, rep.fn)
            per_image.append({"id": ds.records[int(i)].id, **rep.to_dict()})
    aggregate = metrics_from_counts(*(int(v) for v in totals))
    return {
        "threshold": threshold,
        "image_size": image_size,
        "n_images": len(ds),
        "aggregate": aggregate.to_dict(),
        "per_image": per_image,
    }


def predict(model: Model, image_path, out_path, image_size: int,
            threshold: float = 0.5) -> np.ndarray:
    """Segment one image file; writes a {0, 255} mask PNG at the input's
    native resolution and returns the working-resolution probabilities."""
    img = load_image(image_path)
    orig_h, orig_w = img.shape[1], img.shape[2]
    if img.shape[1:] != (image_size, image_size):
        img = resize_image(img, image_size, image_size)
    probs = predict_probabilities(model, img[None])[0, 0]
    full = nearest_resize(probs, orig_h, orig_w)
    save_mask(out_path, (full >= threshold).astype(np.float32))
    return probs


# ---------------------------------------------------------------------------
# model-level gradient checking


def run_model_gradcheck(scale: str = "toy", seed: int = 0):
    """Finite-difference check of the full model plus loss in float64.

    "toy" uses a 2-channel base at 12px, "small" a 4-channel base at 16px.
    Returns the GradcheckReport; sampling covers input pixels and every
    parameter tensor through the shared coordinate pool.
    """
    if scale == "toy":
        base, size, sample = 2, 12, 220
    elif scale == "small":
        base, size, sample = 4, 16, 220
    else:
        raise ValueError(f"unknown gradcheck scale {scale!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    cfg = NetworkConfig(base_channels=base)
    model = Model(cfg, seed=seed, dtype=np.float64)
    x = rng.uniform(0.1, 0.9, size=(1, cfg.in_channels, size, size))
    y = (rng.uniform(size=(1, 1, size, size)) < 0.4).astype(np.float64)
    target = Tensor(y)

    names = [name for name, _ in model.store.trainable()]

    def fn(points):
        for name, p in zip(names, points[:-1]):
            np.copyto(model.store[name].data, p.data)
        pred = model.forward(points[-1], training=True, update_running=False)
        return combined_loss(pred, target)

    points = [Tensor(model.store[name].data.copy()) for name in names]
    points.append(Tensor(x))
    leaves = [model.store[name] for name in names] + [points[-1]]
    return gradcheck(fn, points, h=1e-4, tol=2e-3, sample=sample,
                     rng=np.random.default_rng(seed), min_frac=0.99,
                     leaves=leaves)
