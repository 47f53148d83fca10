"""Frame-by-frame tracking with a template clip and the carried state-space memory."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import tensor as T
from ..errors import ModeError, NumericError
from ..heads import Box
from ..temf import StateSpaceMemory
from .config import Config
from .crop import CropTransform, clamp_box, crop, whole_frame
from .model import MODES, FrameInputs, FrameOutputs, FrozenRefs, ModelParams, frame_forward, new_memory

log = logging.getLogger(__name__)


@dataclass
class TemplateEntry:
    crop: np.ndarray     # (tz, tz, 3) template crop the visual encoder consumes
    confidence: float


class TemplateClip:
    """FIFO of template crops; entry 0 (the first-frame template) is never evicted."""

    def __init__(self, initial: np.ndarray, capacity: int = 3, threshold: float = 0.8):
        if capacity < 1:
            raise ValueError("template clip capacity must be >= 1")
        self.capacity = capacity
        self.threshold = threshold
        self.entries = [TemplateEntry(initial, 1.0)]

    def __len__(self) -> int:
        return len(self.entries)

    def offer(self, crop_: np.ndarray, confidence: float) -> bool:
        """Append when ``confidence`` exceeds the threshold; returns whether the clip changed."""
        if not confidence > self.threshold:
            return False
        self.entries.append(TemplateEntry(crop_, float(confidence)))
        if len(self.entries) > self.capacity:
            del self.entries[1]
        return True

    def stack(self) -> np.ndarray:
        return np.stack([e.crop for e in self.entries])


@dataclass
class TrackRecord:
    frame: int
    box: list[float]     # cx, cy, w, h in frame pixels
    conf: float
    w_l: float
    w_z: float
    iou: float | None

    def to_json(self) -> dict:
        return {"frame": self.frame, "box": [float(v) for v in self.box], "conf": self.conf,
                "w_l": self.w_l, "w_z": self.w_z, "iou": self.iou}


Decoder = Callable[[FrameOutputs], tuple[Box, float]]


@dataclass
class TrackerState:
    params: ModelParams
    cfg: Config
    mode: str
    memory: StateSpaceMemory
    lang_ids: np.ndarray | None = None
    clip: TemplateClip | None = None
    last_box: np.ndarray | None = None
    frozen: FrozenRefs | None = None
    frame_index: int = 0
    srf: bool = False
    memory_reset: bool = False
    min_confidence: float = 0.01
    records: list[TrackRecord] = field(default_factory=list)
    decoder: Decoder | None = None


def _default_decoder(out: FrameOutputs) -> tuple[Box, float]:
    box, conf, _ = out.decode(0)
    return box, conf


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union) if union > 0 else 0.0


def _run(state: TrackerState, inputs: FrameInputs, frozen: FrozenRefs | None) -> FrameOutputs:
    if state.memory_reset:
        state.memory.zero()
    try:
        with T.no_tape():
            return frame_forward(state.params, state.cfg, state.memory, inputs, state.mode, frozen=frozen)
    except NumericError as exc:
        raise NumericError(f"frame {state.frame_index}: {exc}") from exc


def _to_frame(state: TrackerState, box: Box, tf: CropTransform, image: np.ndarray) -> np.ndarray:
    out = tf.to_frame(box.as_array())
    H, W = image.shape[:2]
    out[0] = np.clip(out[0], 0.0, W)
    out[1] = np.clip(out[1], 0.0, H)
    out[2] = np.clip(out[2], 2.0, W)
    out[3] = np.clip(out[3], 2.0, H)
    return out


def _template(state: TrackerState, image: np.ndarray, box) -> np.ndarray:
    c = state.cfg
    return crop(image, box, c.template_scale, c.template_size)[0]


def _record(state: TrackerState, box: np.ndarray, conf: float, out: FrameOutputs, gt) -> TrackRecord:
    rec = TrackRecord(state.frame_index, [float(v) for v in box], float(conf),
                      float(out.clues.w_l.data[0]), float(out.clues.w_z.data[0]),
                      None if gt is None else iou(box, gt))
    state.records.append(rec)
    return rec


def init_tracker(params: ModelParams, cfg: Config, mode: str, image: np.ndarray, init_box=None,
                 lang_ids=None, srf: bool = False, memory_reset: bool = False, gt_box=None,
                 decoder: Decoder | None = None) -> TrackerState:
    """Consume frame 0 and its references.

    Box-initialized modes encode the first-frame template and run one frame so
    the memory holds the references; language-only mode grounds the target on
    the whole frame and seeds the template clip from the grounded box.
    """
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    if mode != "bbox" and lang_ids is None:
        raise ModeError(f"{mode} mode needs a language description")
    if mode != "nl" and init_box is None:
        raise ModeError(f"{mode} mode needs an initial box")
    state = TrackerState(params, cfg, mode, new_memory(params), srf=srf, memory_reset=memory_reset,
                         decoder=decoder)
    if mode != "bbox":
        state.lang_ids = np.asarray(lang_ids, dtype=np.intp).reshape(1, -1)
    if mode == "nl":
        search, tf = whole_frame(image, cfg.search_size)
        out = _run(state, FrameInputs(search[None], state.lang_ids, None), None)
        box, conf = (state.decoder or _default_decoder)(out)
        state.last_box = _to_frame(state, box, tf, image)
        state.clip = TemplateClip(_template(state, image, state.last_box), cfg.clip_len, cfg.conf_threshold)
        _record(state, state.last_box, conf, out, gt_box)
    else:
        init_box = clamp_box(init_box)
        state.clip = TemplateClip(_template(state, image, init_box), cfg.clip_len, cfg.conf_threshold)
        search, _ = crop(image, init_box, cfg.search_scale, cfg.search_size)
        out = _run(state, FrameInputs(search[None], state.lang_ids, state.clip.stack()[None]), None)
        state.last_box = init_box
    state.frozen = out.frozen()
    state.frame_index = 1
    return state


def track_step(state: TrackerState, image: np.ndarray, gt_box=None) -> TrackRecord:
    cfg = state.cfg
    search, tf = crop(image, state.last_box, cfg.search_scale, cfg.search_size)
    if state.srf:
        inputs = FrameInputs(search[None], None, None)
        out = _run(state, inputs, state.frozen)
    else:
        inputs = FrameInputs(search[None], state.lang_ids, state.clip.stack()[None])
        out = _run(state, inputs, None)
    box, conf = (state.decoder or _default_decoder)(out)
    new_box = _to_frame(state, box, tf, image)
    if not np.all(np.isfinite(new_box)) or conf < state.min_confidence:
        log.info("frame %d: confidence %.3f, keeping the previous box", state.frame_index, conf)
        new_box = state.last_box.copy()
    elif not state.srf or cfg.srf_prediction_templates:
        state.clip.offer(_template(state, image, new_box), conf)
    state.last_box = new_box
    rec = _record(state, new_box, conf, out, gt_box)
    state.frame_index += 1
    return rec
