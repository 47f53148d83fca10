"""The full tracker network: encoders, fusion stack, heads, and the training objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import ModeError
from ..heads import (HeadParams, LossWeights, box_head, center_cells, contrastive, cosine_tokens,
                     cxcywh_to_xyxy, decode, focal_center_loss, gaussian_heatmap, giou, init_heads,
                     intra_negatives, modality_select, query_decode, reference_token, refine_search,
                     select_invariant_language, target_discrimination, target_mask, bce_with_logits,
                     Box, BoxMaps, Discrimination, ModalityClues)
from ..layout import ModalityLayout
from ..nn import make_rng
from ..temf import StateSpaceMemory, TemfConfig, TemfParams, init_temf, temf_forward
from ..tensor import Tensor
from .config import Config
from .encoders import (Embeddings, LanguageEncoder, VisualEncoder, assemble, encode_frame,
                       encode_language, init_embeddings, init_language, init_visual)
from .synth import MAX_LANG, VOCAB

log = logging.getLogger(__name__)

MODES = ("bbox", "nl", "nl-bbox")


@dataclass
class ModelParams:
    visual: VisualEncoder
    language: LanguageEncoder
    embeddings: Embeddings
    temf: TemfParams
    heads: HeadParams


def temf_config(cfg: Config) -> TemfConfig:
    return TemfConfig(M=cfg.M, d_model=cfg.d_model, d_state=cfg.d_state, inner_ratio=cfg.inner_ratio,
                      window=cfg.window, conv_width=cfg.conv_width,
                      segment_masked_window=cfg.segment_masked_window)


def init_model(cfg: Config, seed: int | None = None) -> ModelParams:
    seed = cfg.seed if seed is None else seed
    dtype = np.dtype(cfg.dtype)
    d = cfg.d_model
    n_tmp = (cfg.template_size // cfg.patch) ** 2
    n_search = (cfg.search_size // cfg.patch) ** 2
    return ModelParams(
        visual=init_visual(make_rng(seed, 1), d, cfg.patch, dtype=dtype),
        language=init_language(make_rng(seed, 2), len(VOCAB), d, dtype=dtype),
        embeddings=init_embeddings(make_rng(seed, 3), d, MAX_LANG, n_tmp, n_search, dtype=dtype),
        temf=init_temf(make_rng(seed, 4), temf_config(cfg), dtype=dtype),
        heads=init_heads(make_rng(seed, 5), d, cfg.d_state, cfg.head_hidden, dtype=dtype),
    )


def new_memory(params: ModelParams) -> StateSpaceMemory:
    return StateSpaceMemory(params.temf)


@dataclass
class FrameInputs:
    search: np.ndarray                  # (B, S, S, 3)
    lang_ids: np.ndarray | None = None  # (B, n_lang)
    templates: np.ndarray | None = None  # (B, L, tz, tz, 3)


@dataclass
class FrozenRefs:
    """Reference quantities captured on a frame with references, reused when they are absent."""

    level_refs: list[Tensor]   # per fusion level, mean-pooled reference token (B, d)
    T_uni: Tensor
    fused: Tensor
    w_l: Tensor
    w_z: Tensor


@dataclass
class FrameOutputs:
    layout: ModalityLayout
    F_x: Tensor
    T_uni: Tensor
    clues: ModalityClues
    refined: Tensor
    disc: Discrimination
    maps: BoxMaps
    level_search: list[Tensor] = field(default_factory=list)
    level_refs: list[Tensor] = field(default_factory=list)

    def frozen(self) -> FrozenRefs:
        return FrozenRefs(self.level_refs, self.T_uni, self.clues.fused, self.clues.w_l, self.clues.w_z)

    def decode(self, i: int = 0) -> tuple[Box, float, int]:
        return decode(self.maps.center.data[i], self.maps.offset.data[i], self.maps.size.data[i],
                      self.disc.prob.data[i])


def _segment(G: Tensor, layout: ModalityLayout, name: str) -> Tensor | None:
    lo, hi = layout.bounds(name)
    if hi == lo:
        return None
    return G[:, lo:hi, :]


def _invariant_language(F_l: Tensor, F_z: Tensor | None, N: int) -> Tensor:
    idx = np.stack([select_invariant_language(F_l.data[i], None if F_z is None else F_z.data[i], N)
                    for i in range(F_l.shape[0])])
    full = np.broadcast_to(idx[:, :, None], idx.shape + (F_l.shape[-1],))
    return T.take_along(F_l, full, axis=1)


def frame_forward(params: ModelParams, cfg: Config, memory: StateSpaceMemory, inputs: FrameInputs,
                  mode: str, frozen: FrozenRefs | None = None, detach_memory: bool = False) -> FrameOutputs:
    """One frame through the whole network; advances ``memory``.

    ``frozen`` supplies the reference token and fused clue when the frame carries
    no references (semi-reference-free frames).
    """
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    F_x = encode_frame(inputs.search, params.visual)
    F_l = None if inputs.lang_ids is None else encode_language(inputs.lang_ids, params.language)
    F_z = None
    if inputs.templates is not None and inputs.templates.shape[1] > 0:
        b, L = inputs.templates.shape[:2]
        enc = encode_frame(inputs.templates.reshape((b * L,) + inputs.templates.shape[2:]), params.visual)
        F_z = T.reshape(enc, (b, L * enc.shape[1], enc.shape[2]))
    if F_l is None and F_z is None and frozen is None:
        raise ModeError("frame without references needs frozen reference quantities")
    seq = assemble(F_l, F_z, F_x, params.embeddings)
    layout = seq.layout
    levels: list[Tensor] = []
    G = temf_forward(seq.tokens, layout, params.temf, memory, temf_config(cfg),
                     detach=detach_memory, level_outputs=levels)
    level_search = [_segment(g, layout, "search") for g in levels]
    F_x_out = level_search[-1]

    if frozen is None:
        level_refs = [reference_token(_segment(g, layout, "lang"), _segment(g, layout, "template"),
                                      mode if layout.has_template else "nl").T for g in levels]
        if mode != "bbox" and not layout.has_lang:
            raise ModeError(f"{mode} mode needs language tokens")
        F_lo = _segment(G, layout, "lang")
        F_zo = _segment(G, layout, "template")
        T_uni = level_refs[-1]
        P_l = None
        if F_lo is not None and mode != "bbox":
            P_l, _ = query_decode(_invariant_language(F_lo, F_zo, cfg.n_invariant),
                                  params.heads.lang_decoder)
        P_z, _ = query_decode(F_zo, params.heads.vis_decoder)
        clues = modality_select(P_l, P_z, params.heads.selector)
    else:
        level_refs = frozen.level_refs
        T_uni = frozen.T_uni
        clues = ModalityClues(None, None, frozen.w_l, frozen.w_z, frozen.fused)
    refined = refine_search(F_x_out, clues.fused, params.heads)
    disc = target_discrimination(refined, T_uni, params.heads, cfg.tau)
    maps = box_head(refined, params.heads.box)
    return FrameOutputs(layout, F_x_out, T_uni, clues, refined, disc, maps, level_search, level_refs)


# ---------------------------------------------------------------------------
# objective


COMPONENTS = ("bbox", "tgt", "cls", "cw", "co")


def frame_loss(out: FrameOutputs, gt: np.ndarray, cfg: Config, weights: LossWeights) -> tuple[Tensor, dict]:
    """Training objective for one frame; ``gt`` holds (B, 4) cx, cy, w, h in search-crop coordinates."""
    b, n = out.maps.ctr_logit.shape
    side = int(round(np.sqrt(n)))
    dt = out.maps.ctr_logit.dtype
    cells = center_cells(gt, side)
    row, col = np.divmod(cells, side)

    # box regression read out at the ground-truth center cell
    off = T.take_along(out.maps.offset, np.broadcast_to(cells[:, None, None], (b, 1, 2)), axis=1)
    size = T.take_along(out.maps.size, np.broadcast_to(cells[:, None, None], (b, 1, 2)), axis=1)
    grid = Tensor(np.stack([col, row], axis=1)[:, None, :].astype(dt))
    center = T.scale(T.add(grid, off), 1.0 / side)
    pred = T.reshape(T.concat([center, size], axis=-1), (b, 4))
    gt_t = Tensor(gt.astype(dt))
    l1 = T.mean(T.abs_(T.sub(pred, gt_t)))
    g, _ = giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt_t))
    l_giou = T.mean(T.shift(T.neg(g), 1.0))
    l_bbox = T.add(T.scale(l1, weights.l1), T.scale(l_giou, weights.giou))

    l_tgt = bce_with_logits(out.disc.logit, target_mask(gt, side))
    l_cls = focal_center_loss(out.maps.ctr_logit, gaussian_heatmap(gt, side))

    zero = Tensor(np.zeros((), dtype=dt))
    l_cw, l_co = zero, zero
    if weights.cw > 0 or weights.co > 0:
        background = target_mask(gt, side) == 0
        cw_terms, co_terms = [], []
        for feats, ref in zip(out.level_search, out.level_refs):
            sims = cosine_tokens(feats, ref)                          # (B, n)
            idx_pos = cells[:, None]
            s_pos = T.reshape(T.take_along(sims, idx_pos, axis=1), (b,))
            if weights.cw > 0:
                neg_idx = intra_negatives(sims.data, background, cfg.n_intra_neg)
                if neg_idx.shape[1] > 0:
                    cw_terms.append(T.mean(contrastive(s_pos, T.take_along(sims, neg_idx, axis=1), cfg.tau_c)))
            if weights.co > 0 and b > 1:
                # other sequences' target-center tokens against this sequence's reference
                k = min(cfg.n_inter_neg, b - 1)
                centers = T.take_along(feats, np.broadcast_to(cells[:, None, None], (b, 1, feats.shape[-1])),
                                       axis=1)
                centers = T.reshape(centers, (b, feats.shape[-1]))
                cross = T.reshape(cosine_tokens(T.broadcast(T.reshape(centers, (1, b, centers.shape[1])),
                                                            (b, b, centers.shape[1])), ref), (b, b))
                others = np.array([[j for j in range(b) if j != i][:k] for i in range(b)], dtype=np.intp)
                co_terms.append(T.mean(contrastive(s_pos, T.take_along(cross, others, axis=1), cfg.tau_c)))
        if cw_terms:
            l_cw = T.scale(_sum(cw_terms), 1.0 / len(cw_terms))
        if co_terms:
            l_co = T.scale(_sum(co_terms), 1.0 / len(co_terms))

    total = T.add(T.add(T.scale(l_bbox, weights.bbox), T.scale(l_tgt, weights.tgt)),
                  T.add(T.scale(l_cls, weights.cls),
                        T.add(T.scale(l_cw, weights.cw), T.scale(l_co, weights.co))))
    parts = {"bbox": float(l_bbox.data), "tgt": float(l_tgt.data), "cls": float(l_cls.data),
             "cw": float(l_cw.data) * (weights.cw > 0), "co": float(l_co.data) * (weights.co > 0)}
    return total, parts


def _sum(xs: list[Tensor]) -> Tensor:
    acc = xs[0]
    for x in xs[1:]:
        acc = T.add(acc, x)
    return acc
