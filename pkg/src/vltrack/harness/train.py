"""Training loop: AdamW with cosine decay over generated clips unrolled through the memory."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import NumericError
from ..nn import iter_tensors, make_rng
from .config import Config
from .data import Clip, sample_clip
from .model import COMPONENTS, MODES, ModelParams, frame_forward, frame_loss, init_model, new_memory

log = logging.getLogger(__name__)


class AdamW:
    def __init__(self, params: list, lr: float, weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            # decoupled decay on matrices only; gains, biases and scalars are exempt
            if p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.wd
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def lr_at(step: int, cfg: Config) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def clip_loss(params: ModelParams, cfg: Config, clip: Clip):
    """Mean objective over the clip's frames, with per-component means."""
    weights = cfg.loss_weights()
    memory = new_memory(params)
    frozen = None
    total = None
    parts = {k: 0.0 for k in COMPONENTS}
    for f, (inp, gt) in enumerate(zip(clip.frames, clip.targets)):
        out = frame_forward(params, cfg, memory, inp, clip.mode, frozen=frozen if (clip.srf and f > 0) else None)
        if f == 0:
            frozen = out.frozen()
        loss, comp = frame_loss(out, gt, cfg, weights)
        total = loss if total is None else T.add(total, loss)
        for k in COMPONENTS:
            parts[k] += comp[k] / len(clip.frames)
    return T.scale(total, 1.0 / len(clip.frames)), parts


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: Config, progress: bool = False) -> tuple[ModelParams, TrainLog]:
    cfg.validate()
    params = init_model(cfg)
    named = list(iter_tensors(params))
    tensors = [t for _, t in named]
    opt = AdamW(tensors, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2)
    rng = make_rng(cfg.seed, 100)
    history = TrainLog()
    start = time.perf_counter()
    for step in range(cfg.steps):
        mode = MODES[step % len(MODES)]
        clip = sample_clip(cfg, rng, mode)
        with T.Tape() as tape:
            loss, parts = clip_loss(params, cfg, clip)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step} ({mode}): "
                               + ", ".join(f"{k}={v:.4g}" for k, v in parts.items()))
        T.backward(tape, loss)
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        for t in tensors:
            t.grad = None
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            grads = [g * (cfg.grad_clip / norm) for g in grads]
        lr = lr_at(step, cfg)
        opt.step(grads, lr)
        rec = {"step": step, "mode": mode, "srf": clip.srf, "loss": value, "grad_norm": norm, "lr": lr, **parts}
        history.steps.append(rec)
        if progress and (step % 25 == 0 or step == cfg.steps - 1):
            log.info("step %d %s loss %.4f %s", step, mode, value,
                     " ".join(f"{k}={parts[k]:.3f}" for k in COMPONENTS))
    history.seconds = time.perf_counter() - start
    return params, history
