"""Toy visual and language encoders plus the token assembly step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, LayoutError
from ..layout import ModalityLayout, TokenSequence
from ..nn import glorot, linear, param
from ..tensor import Tensor


@dataclass
class MixBlock:
    """Depthwise 3x3 token-grid conv followed by a pointwise MLP, both residual."""

    dw: Tensor       # (9, d)
    dw_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class VisualEncoder:
    patch: int
    w_patch: Tensor   # (patch * patch * 3, d)
    b_patch: Tensor
    blocks: list[MixBlock] = field(default_factory=list)


@dataclass
class LanguageEncoder:
    table: Tensor     # (vocab, d)


@dataclass
class Embeddings:
    pos_lang: Tensor       # (max_lang, d)
    pos_template: Tensor   # (template tokens per crop, d)
    pos_search: Tensor     # (search tokens, d)
    type_emb: Tensor       # (3, d): lang, template, search


def init_visual(rng, d: int, patch: int = 8, n_blocks: int = 2, hidden_ratio: int = 2,
                dtype=np.float32) -> VisualEncoder:
    blocks = []
    for _ in range(n_blocks):
        blocks.append(MixBlock(
            dw=param(rng.normal(size=(9, d)) * (1.0 / 3.0), dtype),
            dw_b=param(np.zeros(d), dtype),
            ln_g=param(np.ones(d), dtype), ln_b=param(np.zeros(d), dtype),
            w1=glorot(rng, d, hidden_ratio * d, dtype), b1=param(np.zeros(hidden_ratio * d), dtype),
            w2=glorot(rng, hidden_ratio * d, d, dtype, gain=0.5), b2=param(np.zeros(d), dtype),
        ))
    fan_in = patch * patch * 3
    return VisualEncoder(patch, glorot(rng, fan_in, d, dtype), param(np.zeros(d), dtype), blocks)


def init_language(rng, vocab: int, d: int, dtype=np.float32) -> LanguageEncoder:
    return LanguageEncoder(param(rng.normal(size=(vocab, d)), dtype))


def init_embeddings(rng, d: int, max_lang: int, n_template: int, n_search: int,
                    dtype=np.float32) -> Embeddings:
    def emb(n):
        return param(rng.normal(size=(n, d)) * 0.02, dtype)
    return Embeddings(emb(max_lang), emb(n_template), emb(n_search), emb(3))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C), row-major over patches."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


_NEIGHBOR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def grid_neighbors(rows: int, cols: int) -> np.ndarray:
    """(rows*cols*9,) indices of 3x3 neighborhoods; out-of-grid points at the pad row ``rows*cols``."""
    key = (rows, cols)
    if key not in _NEIGHBOR_CACHE:
        n = rows * cols
        r, c = np.divmod(np.arange(n), cols)
        out = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
                out.append(np.where(ok, rr * cols + cc, n))
        _NEIGHBOR_CACHE[key] = np.stack(out, axis=1).reshape(-1).astype(np.intp)
    return _NEIGHBOR_CACHE[key]


def depthwise3x3(x: Tensor, w: Tensor, b: Tensor, rows: int, cols: int) -> Tensor:
    bsz, n, d = x.shape
    padded = T.concat([x, Tensor(np.zeros((bsz, 1, d), dtype=x.dtype))], axis=1)
    nb = T.reshape(T.take(padded, grid_neighbors(rows, cols), axis=1), (bsz, n, 9, d))
    y = T.sum_(T.mul(nb, T.broadcast(w, nb.shape)), axis=2)
    return T.add(y, T.broadcast(b, y.shape))


def patch_embed(images: np.ndarray, enc: VisualEncoder) -> Tensor:
    x = Tensor(patchify(np.asarray(images, dtype=enc.w_patch.dtype), enc.patch))
    return linear(x, enc.w_patch, enc.b_patch)


def encode_frame(images: np.ndarray, enc: VisualEncoder) -> Tensor:
    """(B, H, W, 3) images -> (B, (H/p)*(W/p), d) token grid."""
    _, h, w, _ = images.shape
    rows, cols = h // enc.patch, w // enc.patch
    x = patch_embed(images, enc)
    for blk in enc.blocks:
        x = T.add(x, depthwise3x3(x, blk.dw, blk.dw_b, rows, cols))
        hid = T.silu(linear(T.layer_norm(x, blk.ln_g, blk.ln_b), blk.w1, blk.b1))
        x = T.add(x, linear(hid, blk.w2, blk.b2))
    return x


def encode_language(ids: np.ndarray, enc: LanguageEncoder) -> Tensor:
    """(B, n) token ids -> (B, n, d) embeddings."""
    ids = np.asarray(ids, dtype=np.intp)
    b, n = ids.shape
    flat = T.take(enc.table, ids.reshape(-1), axis=0)
    return T.reshape(flat, (b, n, enc.table.shape[1]))


def assemble(F_l: Tensor | None, F_z: Tensor | None, F_x: Tensor, emb: Embeddings) -> TokenSequence:
    """Concatenate [language | template | search] and add positional and modality-type embeddings.

    ``F_z`` may hold several template crops back to back; each crop reuses the
    per-crop positional table.
    """
    if F_x is None or F_x.shape[-2] == 0:
        raise LayoutError("search segment is empty")
    b, _, d = F_x.shape
    feats, toks = [], []
    n_lang = n_tmp = 0
    if F_l is not None and F_l.shape[-2] > 0:
        n_lang = F_l.shape[-2]
        if n_lang > emb.pos_lang.shape[0]:
            raise LayoutError(f"{n_lang} language tokens exceed the {emb.pos_lang.shape[0]} positions")
        pe = T.add(emb.pos_lang[:n_lang], T.broadcast(emb.type_emb[0], (n_lang, d)))
        feats.append(F_l)
        toks.append(T.add(F_l, T.broadcast(pe, F_l.shape)))
    if F_z is not None and F_z.shape[-2] > 0:
        n_tmp = F_z.shape[-2]
        per = emb.pos_template.shape[0]
        if n_tmp % per:
            raise LayoutError(f"{n_tmp} template tokens is not a multiple of {per}")
        reps = n_tmp // per
        pe = T.reshape(T.broadcast(emb.pos_template, (reps, per, d)), (n_tmp, d))
        pe = T.add(pe, T.broadcast(emb.type_emb[1], (n_tmp, d)))
        feats.append(F_z)
        toks.append(T.add(F_z, T.broadcast(pe, F_z.shape)))
    n_x = F_x.shape[-2]
    if n_x != emb.pos_search.shape[0]:
        raise LayoutError(f"{n_x} search tokens, embeddings expect {emb.pos_search.shape[0]}")
    pe = T.add(emb.pos_search, T.broadcast(emb.type_emb[2], (n_x, d)))
    feats.append(F_x)
    toks.append(T.add(F_x, T.broadcast(pe, F_x.shape)))
    layout = ModalityLayout(n_lang, n_tmp, n_x)
    if len(feats) == 1:
        return TokenSequence(toks[0], feats[0], layout)
    return TokenSequence(T.concat(toks, axis=1), T.concat(feats, axis=1), layout)
