"""Stack of time-evolving fusion modules and the multi-level state-space memory.

Each level runs the hybrid state-space block followed by locality enhancement.
Before a level's scans, its initial states are blended from a learnable state
``H_l`` and the terminal states stored for that level on the previous frame:

    H_ini = a * H_l + (1 - a) * H_fin_prev

with ``a = sigmoid(a_logit)``.  On the first frame there is no history and
``H_ini = H_l``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import FormatError, LayoutError, NumericError
from .hmss import ORDERS, DirectionalStates, HmssParams, hmss_forward, init_hmss
from .layout import ModalityLayout
from .nn import param
from .sle import SleParams, init_sle, sle_forward
from .tensor import Tensor


@dataclass
class TemfConfig:
    M: int = 4
    d_model: int = 64
    d_state: int = 8
    inner_ratio: int = 2
    window: int = 8
    conv_width: int = 3
    segment_masked_window: bool = False

    def __post_init__(self):
        for name in ("M", "d_model", "d_state", "inner_ratio", "window", "conv_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"TemfConfig.{name} must be positive")
        if self.conv_width % 2 == 0:
            raise ValueError("conv_width must be odd")

    @property
    def d_inner(self) -> int:
        return self.inner_ratio * self.d_model


@dataclass
class TemfLevel:
    hmss: HmssParams
    sle: SleParams
    h_learn: Tensor   # (d_inner, d_state)
    a_logit: Tensor   # scalar; a = sigmoid(a_logit)


@dataclass
class TemfParams:
    levels: list[TemfLevel] = field(default_factory=list)


def init_temf(rng: np.random.Generator, cfg: TemfConfig, dtype=np.float32) -> TemfParams:
    levels = []
    for _ in range(cfg.M):
        levels.append(TemfLevel(
            hmss=init_hmss(rng, cfg.d_model, cfg.d_inner, cfg.d_state, dtype=dtype),
            sle=init_sle(rng, cfg.d_model, cfg.conv_width, dtype=dtype),
            h_learn=param(np.zeros((cfg.d_inner, cfg.d_state)), dtype),
            a_logit=param(np.zeros(()), dtype),
        ))
    return TemfParams(levels)


class StateSpaceMemory:
    """Per-level, per-ordering terminal scan states carried across frames."""

    def __init__(self, params: TemfParams):
        self.params = params
        self.finals: list[DirectionalStates | None] = [None] * len(params.levels)
        self.t = 0

    @property
    def M(self) -> int:
        return len(self.params.levels)

    def tradeoff(self, level: int) -> Tensor:
        return T.sigmoid(self.params.levels[level].a_logit)

    def reset(self) -> None:
        self.finals = [None] * self.M
        self.t = 0

    def zero(self) -> None:
        """Overwrite every stored terminal state with zeros; the frame counter is kept."""
        self.finals = [None if f is None else DirectionalStates(Tensor(np.zeros_like(f.h_alpha.data)),
                                                                Tensor(np.zeros_like(f.h_beta.data)))
                       for f in self.finals]

    def detach(self) -> None:
        """Cut the gradient path into earlier frames."""
        self.finals = [None if f is None else DirectionalStates(f.h_alpha.detach(), f.h_beta.detach())
                       for f in self.finals]


def init_state(memory: StateSpaceMemory, level: int, direction: str, batch: int = 1) -> Tensor:
    if not 0 <= level < memory.M:
        raise IndexError(f"level {level} out of range for {memory.M} levels")
    if direction not in ORDERS:
        raise ValueError(f"unknown direction {direction!r}")
    lvl = memory.params.levels[level]
    stored = memory.finals[level]
    if memory.t == 0 or stored is None:
        return T.broadcast(lvl.h_learn, (batch,) + lvl.h_learn.shape)
    prev = stored.get(direction)
    shape = prev.shape
    a = T.broadcast(T.reshape(memory.tradeoff(level), (1, 1, 1)), shape)
    one_minus_a = T.shift(T.neg(a), 1.0)
    h_l = T.broadcast(lvl.h_learn, shape)
    return T.add(T.mul(a, h_l), T.mul(one_minus_a, prev))


def temf_forward(G: Tensor, layout: ModalityLayout, params: TemfParams, memory: StateSpaceMemory,
                 cfg: TemfConfig, detach: bool = False, level_outputs: list | None = None) -> Tensor:
    """Run all levels on one frame, rewrite each level's stored states, advance ``t``.

    With ``level_outputs`` given, each level's output sequence is appended to it.
    """
    if memory.M != len(params.levels):
        raise LayoutError(f"memory has {memory.M} levels, params have {len(params.levels)}")
    batch = G.shape[0]
    new_finals = []
    for i, lvl in enumerate(params.levels):
        states = DirectionalStates(init_state(memory, i, "alpha", batch),
                                   init_state(memory, i, "beta", batch))
        try:
            G, fin = hmss_forward(G, layout, lvl.hmss, states)
            G = sle_forward(G, lvl.sle, cfg.window, layout, cfg.segment_masked_window)
        except (NumericError, LayoutError) as exc:
            raise type(exc)(f"level {i}: {exc}") from exc
        if detach:
            fin = DirectionalStates(fin.h_alpha.detach(), fin.h_beta.detach())
        new_finals.append(fin)
        if level_outputs is not None:
            level_outputs.append(G)
    memory.finals = new_finals
    memory.t += 1
    return G


# ---------------------------------------------------------------------------
# snapshot blob: b"TEMF", u32 version, u32 M, u32 t, u8 dtype code, then per
# level a presence byte and, if present, two (u32 rank, u32 dims..., payload)
# arrays for alpha and beta; trailing u32 CRC32 over everything before it.

_MAGIC = b"TEMF"
_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def snapshot(memory: StateSpaceMemory) -> bytes:
    dt = None
    for f in memory.finals:
        if f is not None:
            dt = f.h_alpha.dtype
            break
    if dt is None:
        dt = memory.params.levels[0].h_learn.dtype
    code = _DTYPE_CODES[np.dtype(dt).newbyteorder("<")]
    parts = [_MAGIC, struct.pack("<IIIB", _VERSION, memory.M, memory.t, code)]
    for f in memory.finals:
        if f is None:
            parts.append(b"\x00")
            continue
        parts.append(b"\x01")
        for h in (f.h_alpha, f.h_beta):
            arr = np.ascontiguousarray(h.data, dtype=_CODE_DTYPES[code])
            parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def restore(memory: StateSpaceMemory, blob: bytes) -> None:
    """Load a snapshot; on any format problem raise FormatError and leave ``memory`` untouched."""
    try:
        finals, t = _parse(blob, memory.M)
    except FormatError:
        raise
    except Exception as exc:  # truncated buffers, bad struct data
        raise FormatError(f"corrupt TEMF snapshot: {exc}") from exc
    memory.finals = finals
    memory.t = t


def _parse(blob: bytes, M: int):
    if len(blob) < 17 or blob[:4] != _MAGIC:
        raise FormatError("not a TEMF snapshot")
    body, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc:
        raise FormatError("TEMF snapshot checksum mismatch")
    version, m, t, code = struct.unpack_from("<IIIB", body, 4)
    if version != _VERSION:
        raise FormatError(f"TEMF snapshot version {version} unsupported (expected {_VERSION})")
    if m != M:
        raise FormatError(f"snapshot has {m} levels, memory has {M}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    pos = 4 + struct.calcsize("<IIIB")
    finals = []
    for _ in range(m):
        flag = body[pos]
        pos += 1
        if flag == 0:
            finals.append(None)
            continue
        if flag != 1:
            raise FormatError("bad level presence flag")
        pair = []
        for _ in ORDERS:
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = int(np.prod(dims)) * dt.itemsize
            if pos + nbytes > len(body):
                raise FormatError("truncated TEMF payload")
            arr = np.frombuffer(body, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims)
            pos += nbytes
            pair.append(Tensor(arr.astype(dt.newbyteorder("="))))
        finals.append(DirectionalStates(*pair))
    if pos != len(body):
        raise FormatError("trailing bytes in TEMF snapshot")
    return finals, t
