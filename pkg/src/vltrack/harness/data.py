"""Training clips drawn from generated sequences."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import Config
from .crop import crop, whole_frame
from .model import FrameInputs
from .synth import SynthWorld


@lru_cache(maxsize=512)
def world(seed: int, image_size: int, n_frames: int, hard: bool) -> SynthWorld:
    return SynthWorld(seed, image_size=image_size, n_frames=n_frames, hard_distractors=hard)


@lru_cache(maxsize=8192)
def frame(seed: int, image_size: int, n_frames: int, hard: bool, t: int) -> np.ndarray:
    img = world(seed, image_size, n_frames, hard).render(t)
    img.setflags(write=False)
    return img


def world_for(cfg: Config, seed: int) -> SynthWorld:
    return world(seed, cfg.image_size, cfg.n_frames, cfg.hard_distractors)


def frame_for(cfg: Config, seed: int, t: int) -> np.ndarray:
    return frame(seed, cfg.image_size, cfg.n_frames, cfg.hard_distractors, t)


@dataclass
class Clip:
    mode: str
    srf: bool
    frames: list[FrameInputs]
    targets: list[np.ndarray]     # per frame (B, 4) in search-crop normalized coordinates


def _jittered(box: np.ndarray, rng: np.random.Generator, cfg: Config) -> np.ndarray:
    size = np.sqrt(box[2] * box[3])
    out = box.copy()
    out[:2] += rng.normal(scale=cfg.jitter_center * size, size=2)
    out[2:] *= np.exp(rng.normal(scale=cfg.jitter_scale, size=2))
    return out


def _fit(gt: np.ndarray) -> np.ndarray:
    gt = gt.copy()
    gt[:2] = np.clip(gt[:2], 0.0, 1.0 - 1e-6)
    gt[2:] = np.clip(gt[2:], 1e-3, 1.0)
    return gt


def sample_clip(cfg: Config, rng: np.random.Generator, mode: str) -> Clip:
    B, U = cfg.batch, cfg.unroll
    seeds = cfg.train_seed_base + rng.integers(cfg.n_train, size=B)
    srf = bool(rng.random() < cfg.srf_prob)
    grounding = mode == "nl" and bool(rng.random() < cfg.grounding_prob)
    n_tmp = int(rng.integers(1, cfg.clip_len + 1))
    t0s = np.zeros(B, dtype=int) if grounding else rng.integers(0, cfg.n_frames - U + 1, size=B)
    lang = None
    if mode != "bbox":
        lang = np.stack([np.asarray(world_for(cfg, int(s)).language().ids) for s in seeds])

    def templates(count: int) -> np.ndarray:
        out = np.empty((B, count, cfg.template_size, cfg.template_size, 3), dtype=np.float32)
        for i, s in enumerate(seeds):
            w = world_for(cfg, int(s))
            for k in range(count):
                # entry 0 is the first-frame template; later entries come from earlier frames
                t = 0 if k == 0 else int(rng.integers(0, t0s[i] + 1))
                box = w.box(t) if k == 0 and not grounding else _jittered(w.box(t), rng, cfg)
                out[i, k], _ = crop(frame_for(cfg, int(s), t), box, cfg.template_scale, cfg.template_size)
        return out

    frames, targets = [], []
    tmp_cache = None
    for f in range(U):
        search = np.empty((B, cfg.search_size, cfg.search_size, 3), dtype=np.float32)
        gts = np.empty((B, 4))
        for i, s in enumerate(seeds):
            w = world_for(cfg, int(s))
            t = int(t0s[i]) + f
            img = frame_for(cfg, int(s), t)
            if grounding and f == 0:
                search[i], tf = whole_frame(img, cfg.search_size)
            else:
                anchor = w.box(max(t - 1, 0))
                search[i], tf = crop(img, _jittered(anchor, rng, cfg), cfg.search_scale, cfg.search_size)
            gts[i] = _fit(tf.to_crop(w.box(t)))
        refs = f == 0 or not srf
        tmps = None
        if refs and not (grounding and f == 0):
            if tmp_cache is None:
                tmp_cache = templates(n_tmp)
            tmps = tmp_cache
        frames.append(FrameInputs(search, lang if refs else None, tmps))
        targets.append(gts)
    return Clip(mode, srf, frames, targets)
