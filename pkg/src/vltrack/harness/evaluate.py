"""Sequence runs and aggregate tracking metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, EmptySplitError
from .config import Config
from .data import frame_for, world_for
from .model import ModelParams
from .tracker import TrackRecord, init_tracker, track_step

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_FRACTION = 0.1


def split_seeds(cfg: Config, split: str) -> list[int]:
    if split == "train":
        return [cfg.train_seed_base + i for i in range(cfg.n_train)]
    if split in ("eval", "heldout", "test"):
        return [cfg.eval_seed_base + i for i in range(cfg.n_eval)]
    if split == "empty":
        return []
    raise ConfigError(f"unknown split {split!r}")


def run_sequence(params: ModelParams, cfg: Config, seed: int, mode: str, srf: bool = False,
                 memory_reset: bool = False, decoder=None) -> list[TrackRecord]:
    world = world_for(cfg, seed)
    lang = world.language().ids if mode != "bbox" else None
    init_box = world.box(0) if mode != "nl" else None
    state = init_tracker(params, cfg, mode, frame_for(cfg, seed, 0), init_box=init_box, lang_ids=lang,
                         srf=srf, memory_reset=memory_reset, gt_box=world.box(0), decoder=decoder)
    for t in range(1, world.n_frames):
        track_step(state, frame_for(cfg, seed, t), world.box(t))
    return state.records


def success_auc(ious: np.ndarray) -> float:
    """Mean over IoU thresholds 0, 0.05, ..., 1 of the fraction of frames above the threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    return float(np.mean([(ious > th).mean() for th in IOU_THRESHOLDS]))


def normalized_precision(pred: np.ndarray, gt: np.ndarray, image_side: float) -> float:
    err = np.linalg.norm(pred[:, :2] - gt[:, :2], axis=1)
    return float((err <= PRECISION_FRACTION * image_side).mean())


@dataclass
class Metrics:
    mode: str
    srf: bool
    memory_reset: bool
    n_sequences: int
    n_frames: int
    mean_iou: float
    auc: float
    norm_precision: float
    seconds_per_frame: float
    per_sequence_iou: list[float]

    def to_json(self) -> dict:
        return dict(vars(self))


def evaluate(params: ModelParams, cfg: Config, seeds: list[int], mode: str, srf: bool = False,
             memory_reset: bool = False) -> Metrics:
    if not seeds:
        raise EmptySplitError("evaluation split has no sequences")
    ious, preds, gts, per_seq = [], [], [], []
    frames = 0
    start = time.perf_counter()
    for seed in seeds:
        recs = run_sequence(params, cfg, seed, mode, srf, memory_reset)
        world = world_for(cfg, seed)
        seq_iou = [r.iou for r in recs]
        per_seq.append(float(np.mean(seq_iou)))
        ious.extend(seq_iou)
        preds.extend(r.box for r in recs)
        gts.extend(world.box(r.frame) for r in recs)
        frames += len(recs) + (mode != "nl")   # frame 0 is processed in every mode
    elapsed = time.perf_counter() - start
    ious = np.asarray(ious)
    return Metrics(mode, srf, memory_reset, len(seeds), len(ious), float(ious.mean()), success_auc(ious),
                   normalized_precision(np.asarray(preds), np.asarray(gts), cfg.image_size),
                   elapsed / max(frames, 1), per_seq)
