"""Modality selection, target discrimination, box head and training losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ModeError, ShapeError
from .nn import cosine_rows, glorot, linear, param
from .ssm import selective_scan
from .tensor import Tensor

log = logging.getLogger(__name__)

COS_EPS = 1e-8


# ---------------------------------------------------------------------------
# parameters


@dataclass
class QueryDecoder:
    query: Tensor   # (d,)
    w_k: Tensor
    w_v: Tensor


@dataclass
class SelectorParams:
    """Two-token selective scan that scores the language and template clues."""

    w_dt: Tensor
    dt_bias: Tensor
    w_b: Tensor
    w_c: Tensor
    a_log: Tensor
    d_skip: Tensor
    w_score: Tensor   # (d, 1)


@dataclass
class BoxHeadParams:
    conv_w: Tensor    # (9 * d, hidden) 3x3 tower on the token grid
    conv_b: Tensor
    w_ctr: Tensor     # (hidden, 1)
    b_ctr: Tensor
    w_off: Tensor     # (hidden, 2)
    b_off: Tensor
    w_size: Tensor    # (hidden, 2)
    b_size: Tensor


@dataclass
class HeadParams:
    lang_decoder: QueryDecoder
    vis_decoder: QueryDecoder
    selector: SelectorParams
    w_refine: Tensor
    refine_g: Tensor
    refine_b: Tensor
    w_tgt: Tensor
    b_tgt: Tensor
    w_bgd: Tensor
    b_bgd: Tensor
    box: BoxHeadParams


def init_heads(rng: np.random.Generator, d: int, d_state: int = 8, hidden: int = 32,
               dtype=np.float32) -> HeadParams:
    def dec():
        return QueryDecoder(param(rng.normal(size=d) / np.sqrt(d), dtype),
                            glorot(rng, d, d, dtype), glorot(rng, d, d, dtype))

    sel = SelectorParams(
        w_dt=glorot(rng, d, d, dtype, gain=0.1),
        dt_bias=param(np.full(d, np.log(np.expm1(0.5))), dtype),
        w_b=glorot(rng, d, d_state, dtype),
        w_c=glorot(rng, d, d_state, dtype),
        a_log=param(np.log(np.tile(np.geomspace(1.0, d_state, d_state), (d, 1))), dtype),
        d_skip=param(np.ones(d), dtype),
        w_score=glorot(rng, d, 1, dtype),
    )
    box = BoxHeadParams(
        conv_w=glorot(rng, 9 * d, hidden, dtype), conv_b=param(np.zeros(hidden), dtype),
        w_ctr=glorot(rng, hidden, 1, dtype), b_ctr=param(np.full(1, -2.0), dtype),
        w_off=glorot(rng, hidden, 2, dtype), b_off=param(np.zeros(2), dtype),
        w_size=glorot(rng, hidden, 2, dtype), b_size=param(np.full(2, -1.5), dtype),
    )
    return HeadParams(
        lang_decoder=dec(), vis_decoder=dec(), selector=sel,
        w_refine=glorot(rng, d, d, dtype, gain=0.5),
        refine_g=param(np.ones(d), dtype), refine_b=param(np.zeros(d), dtype),
        w_tgt=glorot(rng, d, d, dtype), b_tgt=param(np.zeros(d), dtype),
        w_bgd=glorot(rng, d, d, dtype), b_bgd=param(np.zeros(d), dtype),
        box=box,
    )


# ---------------------------------------------------------------------------
# similarity and reference tokens


def cosine_sim(a, b, debug: bool = False) -> float:
    """Plain cosine similarity of two vectors (numpy), with an epsilon floor on the norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if debug and (na < COS_EPS or nb < COS_EPS):
        log.warning("cosine_sim: zero-norm vector, using epsilon floor")
    return float(a @ b / (max(na, COS_EPS) * max(nb, COS_EPS)))


def cosine_tokens(tokens: Tensor, ref: Tensor) -> Tensor:
    """Cosine of each token (B, N, d) against one reference per batch item (B, d) -> (B, N)."""
    r = T.reshape(ref, (ref.shape[0], 1, ref.shape[1]))
    return T.reshape(cosine_rows(tokens, r), tokens.shape[:2])


def mean_pool(tokens: Tensor) -> Tensor:
    return T.mean(tokens, axis=-2)


@dataclass
class ReferenceToken:
    T: Tensor
    source: str   # "template" | "language" | "pooled-both"


def reference_token(F_l: Tensor | None, F_z: Tensor | None, mode: str) -> ReferenceToken:
    """Mean-pooled unified reference: template for bbox, language for nl, both for nl-bbox."""
    if mode == "bbox":
        if F_z is None:
            raise ModeError("bbox mode needs template tokens")
        return ReferenceToken(mean_pool(F_z), "template")
    if mode == "nl":
        if F_l is None:
            raise ModeError("nl mode needs language tokens")
        return ReferenceToken(mean_pool(F_l), "language")
    if mode == "nl-bbox":
        if F_l is None or F_z is None:
            raise ModeError("nl-bbox mode needs language and template tokens")
        return ReferenceToken(mean_pool(T.concat([F_l, F_z], axis=-2)), "pooled-both")
    raise ModeError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# modality selection


def select_invariant_language(F_l: np.ndarray, F_z: np.ndarray | None, N: int) -> np.ndarray:
    """Indices of the N language tokens most similar to any template token.

    Works on one sequence: F_l (n_lang, d), F_z (n_template, d).  Returned best
    first, ties broken by lower index.
    With ``N >= n_lang`` every token is returned in original order.  Without
    template tokens the first N tokens are used.
    """
    n_lang = F_l.shape[0]
    if n_lang == 0:
        return np.zeros(0, dtype=np.intp)
    if N >= n_lang:
        return np.arange(n_lang, dtype=np.intp)
    if F_z is None or F_z.shape[0] == 0:
        return np.arange(N, dtype=np.intp)
    ln = F_l / np.maximum(np.linalg.norm(F_l, axis=1, keepdims=True), COS_EPS)
    zn = F_z / np.maximum(np.linalg.norm(F_z, axis=1, keepdims=True), COS_EPS)
    score = (ln @ zn.T).max(axis=1)
    order = np.lexsort((np.arange(n_lang), -score))
    return order[:N].astype(np.intp)


def query_decode(tokens: Tensor | None, dec: QueryDecoder) -> tuple[Tensor | None, bool]:
    """Single-query softmax cross-attention: tokens (B, n, d) -> (B, d).

    Returns ``(P, present)``; empty input yields ``(None, False)``.
    """
    if tokens is None or tokens.shape[-2] == 0:
        return None, False
    d = tokens.shape[-1]
    keys = T.matmul(tokens, dec.w_k)
    vals = T.matmul(tokens, dec.w_v)
    q = T.reshape(dec.query, (d, 1))
    logits = T.scale(T.matmul(keys, q), 1.0 / np.sqrt(d))            # (B, n, 1)
    attn = T.softmax(logits, axis=-2)
    attn_t = T.permute(attn, (0, 2, 1))                                # (B, 1, n)
    out = T.matmul(attn_t, vals)                                       # (B, 1, d)
    return T.reshape(out, (tokens.shape[0], d)), True


@dataclass
class ModalityClues:
    P_l: Tensor | None
    P_z: Tensor | None
    w_l: Tensor   # (B,)
    w_z: Tensor
    fused: Tensor  # (B, d)
    scores: Tensor | None = None   # (B, 2) raw selector scores when both present


def modality_select(P_l: Tensor | None, P_z: Tensor | None, sel: SelectorParams) -> ModalityClues:
    if P_l is None and P_z is None:
        raise ModeError("modality_select: both modalities absent")
    ref = P_z if P_z is not None else P_l
    b = ref.shape[0]
    if P_l is None or P_z is None:
        one = Tensor(np.ones(b, dtype=ref.dtype))
        zero = Tensor(np.zeros(b, dtype=ref.dtype))
        if P_l is None:
            return ModalityClues(None, P_z, zero, one, P_z)
        return ModalityClues(P_l, None, one, zero, P_l)
    d = ref.shape[1]
    x = T.concat([T.reshape(P_l, (b, 1, d)), T.reshape(P_z, (b, 1, d))], axis=1)   # (B, 2, d)
    delta = T.softplus(linear(x, sel.w_dt, sel.dt_bias))
    A = T.neg(T.exp(sel.a_log))
    h0 = Tensor(np.zeros((b, d, sel.a_log.shape[1]), dtype=ref.dtype))
    y, _ = selective_scan(x, delta, A, T.matmul(x, sel.w_b), T.matmul(x, sel.w_c), sel.d_skip, h0)
    scores = T.reshape(T.matmul(y, sel.w_score), (b, 2))
    w = T.softmax(scores, axis=-1)
    w_l = T.reshape(w[:, 0:1], (b,))
    w_z = T.reshape(w[:, 1:2], (b,))
    fused = T.add(T.mul(T.broadcast(T.reshape(w_l, (b, 1)), (b, d)), P_l),
                  T.mul(T.broadcast(T.reshape(w_z, (b, 1)), (b, d)), P_z))
    return ModalityClues(P_l, P_z, w_l, w_z, fused, scores)


def refine_search(F_x: Tensor, P_hat: Tensor | None, params: HeadParams) -> Tensor:
    """F_x'_i = LayerNorm(F_x_i + cos(P_hat, F_x_i) * (W_r P_hat))."""
    if P_hat is None:
        return T.layer_norm(F_x, params.refine_g, params.refine_b)
    b, n, d = F_x.shape
    gate = cosine_tokens(F_x, P_hat)                                    # (B, n)
    mod = T.matmul(P_hat, params.w_refine)                             # (B, d)
    add_term = T.mul(T.broadcast(T.reshape(gate, (b, n, 1)), F_x.shape),
                     T.broadcast(T.reshape(mod, (b, 1, d)), F_x.shape))
    return T.layer_norm(T.add(F_x, add_term), params.refine_g, params.refine_b)


# ---------------------------------------------------------------------------
# target discrimination and box head


@dataclass
class Discrimination:
    logit: Tensor    # (B, n): (s_tgt - s_bgd) / tau; target prob = sigmoid(logit)
    prob: Tensor
    T_tgt: Tensor
    T_bgd: Tensor


def target_discrimination(F_x: Tensor, T_uni: Tensor, params: HeadParams, tau: float = 0.1) -> Discrimination:
    t_tgt = linear(T_uni, params.w_tgt, params.b_tgt)
    t_bgd = linear(T_uni, params.w_bgd, params.b_bgd)
    s_t = cosine_tokens(F_x, t_tgt)
    s_b = cosine_tokens(F_x, t_bgd)
    # 2-way softmax over (s_t, s_b)/tau == sigmoid of the scaled difference
    logit = T.scale(T.sub(s_t, s_b), 1.0 / tau)
    return Discrimination(logit, T.sigmoid(logit), t_tgt, t_bgd)


def _grid_neighbors(side: int) -> np.ndarray:
    """Index map (side*side, 9) into a token list with an extra zero token at the end."""
    pad = side * side
    idx = np.full((side * side, 9), pad, dtype=np.intp)
    for r in range(side):
        for c in range(side):
            k = 0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < side and 0 <= cc < side:
                        idx[r * side + c, k] = rr * side + cc
                    k += 1
    return idx


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None, side: int) -> Tensor:
    """3x3 same-padded convolution over a row-major token grid: x (B, side*side, c)."""
    bsz, n, c = x.shape
    if n != side * side:
        raise ShapeError(f"conv3x3: {n} tokens is not a {side}x{side} grid")
    padded = T.concat([x, Tensor(np.zeros((bsz, 1, c), dtype=x.dtype))], axis=1)
    nb = T.take(padded, _grid_neighbors(side).reshape(-1), axis=1)          # (B, n*9, c)
    cols = T.reshape(nb, (bsz, n, 9 * c))
    return linear(cols, w, b)


@dataclass
class BoxMaps:
    ctr_logit: Tensor   # (B, n)
    offset: Tensor      # (B, n, 2) in [0, 1]
    size: Tensor        # (B, n, 2) in [0, 1]

    @property
    def center(self) -> Tensor:
        return T.sigmoid(self.ctr_logit)


def box_head(F_x: Tensor, params: BoxHeadParams) -> BoxMaps:
    b, n, _ = F_x.shape
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ShapeError(f"box_head needs a square token grid, got {n} tokens")
    hid = T.relu(conv3x3(F_x, params.conv_w, params.conv_b, side))
    ctr = T.reshape(linear(hid, params.w_ctr, params.b_ctr), (b, n))
    off = T.sigmoid(linear(hid, params.w_off, params.b_off))
    size = T.sigmoid(linear(hid, params.w_size, params.b_size))
    return BoxMaps(ctr, off, size)


@dataclass
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def xyxy(self) -> np.ndarray:
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2,
                         self.cx + self.w / 2, self.cy + self.h / 2])


def decode(center: np.ndarray, offset: np.ndarray, size: np.ndarray,
           target_prob: np.ndarray | None = None) -> tuple[Box, float, int]:
    """Decode one box from activated maps of one sequence.

    center (n,), offset (n, 2), size (n, 2), target_prob (n,) with n = side^2.
    Selection score = center * target_prob; argmax ties go to the lowest
    row-major index.  Returns (box, confidence, cell).
    """
    n = center.shape[0]
    side = int(round(np.sqrt(n)))
    score = center if target_prob is None else center * target_prob
    cell = int(np.argmax(score))         # first maximum == lowest row-major index
    row, col = divmod(cell, side)
    cx = (col + offset[cell, 0]) / side
    cy = (row + offset[cell, 1]) / side
    conf = float(target_prob[cell]) if target_prob is not None else float(center[cell])
    return Box(float(cx), float(cy), float(size[cell, 0]), float(size[cell, 1])), conf, cell


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    bbox: float = 1.0
    tgt: float = 1.0
    cls: float = 1.0
    cw: float = 0.5
    co: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def contrastive(s_pos: Tensor, s_neg: Tensor, tau: float = 1.0) -> Tensor:
    """-log(e^{s_p} / (e^{s_p} + sum_k e^{s_nk})) per row; s_pos (B,), s_neg (B, K)."""
    b = s_pos.shape[0]
    logits = T.scale(T.concat([T.reshape(s_pos, (b, 1)), s_neg], axis=1), 1.0 / tau)
    return T.sub(T.logsumexp(logits, axis=-1), T.scale(s_pos, 1.0 / tau))


def contrastive_value(s_pos: float, s_neg, tau: float = 1.0) -> float:
    z = np.concatenate([[s_pos], np.asarray(s_neg, dtype=np.float64)]) / tau
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - s_pos / tau)


def cxcywh_to_xyxy(b: Tensor) -> Tensor:
    c = b[..., 0:2]
    half = T.scale(b[..., 2:4], 0.5)
    return T.concat([T.sub(c, half), T.add(c, half)], axis=-1)


def giou(pred: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    """(GIoU, IoU) of xyxy boxes (..., 4)."""
    lt = T.maximum(pred[..., 0:2], gt[..., 0:2])
    rb = T.minimum(pred[..., 2:4], gt[..., 2:4])
    wh = T.relu(T.sub(rb, lt))
    inter = T.mul(wh[..., 0], wh[..., 1])
    pw = T.sub(pred[..., 2:4], pred[..., 0:2])
    gw = T.sub(gt[..., 2:4], gt[..., 0:2])
    area_p = T.mul(pw[..., 0], pw[..., 1])
    area_g = T.mul(gw[..., 0], gw[..., 1])
    union = T.sub(T.add(area_p, area_g), inter)
    iou = T.div(inter, union)
    elt = T.minimum(pred[..., 0:2], gt[..., 0:2])
    erb = T.maximum(pred[..., 2:4], gt[..., 2:4])
    ewh = T.sub(erb, elt)
    enclose = T.mul(ewh[..., 0], ewh[..., 1])
    g = T.sub(iou, T.div(T.sub(enclose, union), enclose))
    return g, iou


def giou_loss(pred_xyxy: Tensor, gt_xyxy: Tensor) -> Tensor:
    g, _ = giou(pred_xyxy, gt_xyxy)
    return T.mean(T.shift(T.neg(g), 1.0))


def gaussian_heatmap(gt_boxes: np.ndarray, side: int, min_sigma: float = 0.5) -> np.ndarray:
    """Center-cell Gaussian targets (B, side*side), peak exactly 1 at the GT cell."""
    out = np.zeros((gt_boxes.shape[0], side * side))
    rr, cc = np.mgrid[0:side, 0:side]
    for i, (cx, cy, w, h) in enumerate(gt_boxes):
        col = min(int(cx * side), side - 1)
        row = min(int(cy * side), side - 1)
        sigma = max(min_sigma, (w + h) * side / 12.0)
        g = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2 * sigma ** 2))
        out[i] = g.reshape(-1)
    return out


def focal_center_loss(ctr_logit: Tensor, heat: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Gaussian-weighted focal loss on the center score map, normalized by positives."""
    pos = (heat >= 1.0 - 1e-9).astype(ctr_logit.dtype)
    p = T.sigmoid(ctr_logit)
    log_p = T.neg(T.softplus(T.neg(ctr_logit)))
    log_1mp = T.neg(T.softplus(ctr_logit))
    one_minus_p = T.shift(T.neg(p), 1.0)
    pos_term = T.mul(T.mul(T.mul(one_minus_p, one_minus_p), log_p), Tensor(pos))
    neg_w = ((1.0 - heat) ** beta * (1.0 - pos)).astype(ctr_logit.dtype)
    neg_term = T.mul(T.mul(T.mul(p, p), log_1mp), Tensor(neg_w))
    npos = max(1.0, float(pos.sum()))
    return T.scale(T.sum_(T.add(pos_term, neg_term)), -1.0 / npos)


def target_mask(gt_boxes: np.ndarray, side: int) -> np.ndarray:
    """1 for grid cells whose centers fall inside the GT box, (B, side*side)."""
    centers = (np.arange(side) + 0.5) / side
    cx, cy = np.meshgrid(centers, centers)
    out = np.zeros((gt_boxes.shape[0], side * side))
    for i, (bx, by, w, h) in enumerate(gt_boxes):
        inside = (np.abs(cx - bx) <= w / 2) & (np.abs(cy - by) <= h / 2)
        if not inside.any():
            inside[min(int(by * side), side - 1), min(int(bx * side), side - 1)] = True
        out[i] = inside.reshape(-1)
    return out


def bce_with_logits(logit: Tensor, target: np.ndarray) -> Tensor:
    t = Tensor(target.astype(logit.dtype))
    # softplus(x) - t * x
    return T.mean(T.sub(T.softplus(logit), T.mul(t, logit)))


def center_cells(gt_boxes: np.ndarray, side: int) -> np.ndarray:
    col = np.minimum((gt_boxes[:, 0] * side).astype(int), side - 1)
    row = np.minimum((gt_boxes[:, 1] * side).astype(int), side - 1)
    return (row * side + col).astype(np.intp)


def intra_negatives(sims: np.ndarray, background: np.ndarray, k: int) -> np.ndarray:
    """Per row, the k most similar background token indices (B, k'); k' = min over rows."""
    idx = []
    avail = int(background.sum(axis=1).min())
    if avail < k:
        log.warning("only %d background tokens available for %d intra negatives", avail, k)
        k = avail
    for s, bg in zip(sims, background):
        cand = np.flatnonzero(bg)
        order = cand[np.lexsort((cand, -s[cand]))]
        idx.append(order[:k])
    return np.asarray(idx, dtype=np.intp).reshape(len(sims), k)
