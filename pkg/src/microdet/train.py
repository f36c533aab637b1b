"""Toy training loop: decoupled-weight-decay adaptive moments on the registry."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import DatasetManifest
from .losses import LossWeights, detection_loss
from .metrics import Detection, GroundTruth
from .model import MicroDetector, ModelConfig, build_model, decode
from .tensor import DomainError, GradTape, ShapeError, Tensor4, backward


@dataclass
class TrainParams:
    lr: float = 0.01
    weight_decay: float = 0.0005
    momentum: float = 0.937      # first-moment coefficient
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 600
    batch_size: int = 0          # 0 = full batch
    warmup_steps: int = 30
    lr_final_frac: float = 0.05
    seed: int = 0
    lambda_cls: float = 0.5
    lambda_box: float = 7.5
    lambda_dfl: float = 1.5

    @classmethod
    def from_dict(cls, raw: dict):
        kwargs = {}
        parsers = {
            "lr": float, "weight_decay": float, "momentum": float, "beta2": float,
            "eps": float, "lr_final_frac": float,
            "lambda_cls": float, "lambda_box": float, "lambda_dfl": float,
            "steps": int, "batch_size": int, "warmup_steps": int, "seed": int,
        }
        for key, value in raw.items():
            if key in parsers:
                kwargs[key] = parsers[key](value)
        if "APD_SEED" in os.environ:
            kwargs["seed"] = int(os.environ["APD_SEED"])
        return cls(**kwargs)

    def loss_weights(self):
        return LossWeights(self.lambda_cls, self.lambda_box, self.lambda_dfl)


@dataclass
class LrSchedule:
    """Linear warmup then cosine decay to final_frac * base."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 30
    final_frac: float = 0.05

    def lr(self, step):
        if self.total_steps <= 0:
            return self.base_lr
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / max(1, self.warmup_steps)
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        lo = self.base_lr * self.final_frac
        return lo + 0.5 * (self.base_lr - lo) * (1.0 + np.cos(np.pi * t))


@dataclass
class TrainState:
    model: MicroDetector
    moment1: dict = field(default_factory=dict)
    moment2: dict = field(default_factory=dict)
    step: int = 0
    schedule: LrSchedule | None = None
    seed: int = 0

    def init_moments(self):
        for name, p in self.model.named_params():
            self.moment1[name] = np.zeros_like(p.data)
            self.moment2[name] = np.zeros_like(p.data)


def adamw_step(state: TrainState, params: TrainParams):
    """One decoupled-weight-decay update over the registry, in registry order."""
    lr = state.schedule.lr(state.step)
    b1, b2 = params.momentum, params.beta2
    t = state.step + 1
    for name, p in state.model.named_params():
        g = p.grad
        if g is None:
            continue
        m = state.moment1[name] = b1 * state.moment1[name] + (1 - b1) * g
        v = state.moment2[name] = b2 * state.moment2[name] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + params.eps)
                        + params.weight_decay * p.data)
    state.step += 1
    return lr


def _stack_images(manifest: DatasetManifest, indices):
    imgs = [manifest.load_image(i) for i in indices]
    shape = imgs[0].shape
    for i, img in zip(indices, imgs):
        if img.shape != shape:
            raise ShapeError("train", f"image {i} shape {img.shape} != {shape}")
    h, w = shape[2], shape[3]
    if h % 32 or w % 32:
        raise ShapeError("train", f"image dims ({h},{w}) not divisible by 32")
    return Tensor4(np.concatenate([im.data for im in imgs], axis=0))


def train_toy(manifest: DatasetManifest, model_cfg: ModelConfig,
              params: TrainParams, log_every=0, stop_loss_frac=None):
    """Optimize the detection loss on a toy manifest; deterministic per seed.

    Returns (TrainState, curve) where curve rows are
    (step, lr, total, cls, box, dfl). Non-finite losses abort with the
    offending term named. stop_loss_frac, when set, ends training once the
    total drops below that fraction of the step-0 total.
    """
    model = build_model(model_cfg, params.seed)
    model.set_training(True, track_stats=True)
    state = TrainState(model=model, seed=params.seed,
                       schedule=LrSchedule(params.lr, params.steps,
                                           params.warmup_steps, params.lr_final_frac))
    state.init_moments()
    weights = params.loss_weights()
    n = len(manifest.entries)
    if n == 0:
        raise DomainError("train", "manifest has no images")
    gts_all = [manifest.load_gts(i) for i in range(n)]
    rng = np.random.default_rng(params.seed)

    full_batch = params.batch_size <= 0 or params.batch_size >= n
    if full_batch:
        batch = _stack_images(manifest, list(range(n)))
        batch_gts = gts_all

    order = []
    curve = []
    initial_total = None
    for step in range(params.steps):
        if not full_batch:
            if len(order) < params.batch_size:
                order.extend(rng.permutation(n).tolist())
            idx = [order.pop(0) for _ in range(params.batch_size)]
            batch = _stack_images(manifest, idx)
            batch_gts = [gts_all[i] for i in idx]

        tape = GradTape()
        preds = model.forward(batch, tape)
        _, breakdown = detection_loss(preds, batch_gts, weights, tape)
        for term in ("cls", "box", "dfl", "total"):
            if not np.isfinite(breakdown[term]):
                raise DomainError("train", f"non-finite {term} loss at step {step}")
        backward(tape)
        lr = adamw_step(state, params)
        curve.append((step, lr, breakdown["total"], breakdown["cls"],
                      breakdown["box"], breakdown["dfl"]))
        if initial_total is None:
            initial_total = breakdown["total"]
        if log_every and step % log_every == 0:
            print(f"step {step} lr {lr:.5f} total {breakdown['total']:.5f} "
                  f"cls {breakdown['cls']:.5f} box {breakdown['box']:.5f} "
                  f"dfl {breakdown['dfl']:.5f}")
        if (stop_loss_frac is not None and initial_total > 0
                and breakdown["total"] <= stop_loss_frac * initial_total):
            break
    return state, curve


def predict_manifest(model: MicroDetector, cfg: ModelConfig, manifest: DatasetManifest):
    """Inference over a manifest: (detections, ground truths) with file-stem ids."""
    model.set_training(False)
    dets, gts = [], []
    for i, (img_path, _) in enumerate(manifest.entries):
        stem = img_path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
        img = manifest.load_image(i)
        preds = model.forward(img)
        for d in decode(preds, cfg):
            dets.append(Detection(d.class_id, d.confidence, d.box, stem))
        for g in manifest.load_gts(i):
            gts.append(GroundTruth(g.class_id, g.box, stem))
    return dets, gts
