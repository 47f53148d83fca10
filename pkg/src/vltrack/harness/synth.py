"""Seeded synthetic vision-language tracking sequences.

A world is a dark textured background with one target and a few distractors
(colored squares, circles, triangles) moving under simple motion models.
Everything is derived from the seed, so ``SynthWorld(seed)`` regenerates
bit-identical frames and boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn import make_rng

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange")
PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.35, 0.95],
    [0.95, 0.90, 0.15],
    [0.15, 0.90, 0.90],
    [0.90, 0.20, 0.85],
    [0.95, 0.95, 0.95],
    [0.98, 0.55, 0.10],
])
MOTIONS = ("linear", "sinusoidal", "random-walk")
RELATIONS = ("left", "right", "top", "bottom")

# vocabulary: pad, "the", colors, shapes, motions, relations
VOCAB = ("<pad>", "the") + COLORS + SHAPES + MOTIONS + RELATIONS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_LANG = 6


@dataclass
class ObjectSpec:
    shape: int
    color: int
    size: float
    motion: int
    track: np.ndarray   # (n_frames, 2) top-left corner in pixels


@dataclass
class SynthLanguage:
    ids: list[int]

    @property
    def words(self) -> list[str]:
        return [VOCAB[i] for i in self.ids]

    def __len__(self) -> int:
        return len(self.ids)


def _motion_track(rng: np.random.Generator, motion: int, size: float, side: int, n: int) -> np.ndarray:
    lo, hi = 0.0, side - size
    pos = np.empty((n, 2))
    p = rng.uniform(lo, hi, size=2)
    if MOTIONS[motion] == "linear":
        v = rng.uniform(0.6, 1.8, size=2) * rng.choice([-1, 1], size=2)
        for t in range(n):
            pos[t] = p
            p = p + v
            for k in range(2):
                if p[k] < lo or p[k] > hi:
                    v[k] = -v[k]
                    p[k] = np.clip(p[k], lo, hi)
    elif MOTIONS[motion] == "sinusoidal":
        amp = rng.uniform(4.0, 12.0, size=2)
        freq = rng.uniform(0.08, 0.2, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        base = np.clip(p, lo + amp, hi - amp) if np.all(hi - amp > lo + amp) else p
        for t in range(n):
            pos[t] = np.clip(base + amp * np.sin(freq * t + phase), lo, hi)
    else:
        v = np.zeros(2)
        for t in range(n):
            pos[t] = p
            v = 0.8 * v + rng.normal(scale=0.7, size=2)
            p = np.clip(p + v, lo, hi)
    return pos


def _mask(shape: int, size: float, x0: float, y0: float, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    u = (xx - x0) / size
    v = (yy - y0) / size
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    name = SHAPES[shape]
    if name == "circle":
        inside &= (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif name == "triangle":
        inside &= np.abs(u - 0.5) <= 0.5 * v
    return inside


@dataclass
class SynthWorld:
    seed: int
    image_size: int = 64
    n_frames: int = 24
    min_size: float = 10.0
    max_size: float = 16.0
    max_distractors: int = 3
    hard_distractors: bool = False
    target: ObjectSpec = field(init=False)
    distractors: list[ObjectSpec] = field(init=False)

    def __post_init__(self):
        rng = make_rng(self.seed, 0)
        side = self.image_size
        size = rng.uniform(self.min_size, self.max_size)
        motion = int(rng.integers(len(MOTIONS)))
        shape, color = int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS)))
        self.target = ObjectSpec(shape, color, size, motion,
                                 _motion_track(rng, motion, size, side, self.n_frames))
        self.distractors = []
        for _ in range(int(rng.integers(1, self.max_distractors + 1))):
            while True:
                ds, dc = int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS)))
                if self.hard_distractors or (ds, dc) != (shape, color):
                    break
            dsize = rng.uniform(self.min_size, self.max_size)
            dm = int(rng.integers(len(MOTIONS)))
            self.distractors.append(ObjectSpec(ds, dc, dsize, dm,
                                               _motion_track(rng, dm, dsize, side, self.n_frames)))
        self._bg_color = rng.uniform(0.05, 0.3, size=3)
        self._noise_seed = int(rng.integers(2 ** 31))

    def box(self, t: int) -> np.ndarray:
        """Ground-truth (cx, cy, w, h) in pixels."""
        x0, y0 = self.target.track[t]
        s = self.target.size
        return np.array([x0 + s / 2, y0 + s / 2, s, s])

    def boxes(self) -> np.ndarray:
        return np.stack([self.box(t) for t in range(self.n_frames)])

    def render(self, t: int) -> np.ndarray:
        side = self.image_size
        rng = make_rng(self._noise_seed, t)
        img = np.empty((side, side, 3))
        img[:] = self._bg_color
        img += rng.normal(scale=0.04, size=img.shape)
        for obj in self.distractors + [self.target]:
            x0, y0 = obj.track[t]
            m = _mask(obj.shape, obj.size, x0, y0, side)
            img[m] = PALETTE[obj.color]
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    def language(self) -> SynthLanguage:
        tgt = self.target
        cx, cy, _, _ = self.box(0)
        dx, dy = cx - self.image_size / 2, cy - self.image_size / 2
        if abs(dx) >= abs(dy):
            rel = "left" if dx < 0 else "right"
        else:
            rel = "top" if dy < 0 else "bottom"
        words = ["the", COLORS[tgt.color], SHAPES[tgt.shape], MOTIONS[tgt.motion], rel]
        return SynthLanguage([TOKEN_ID[w] for w in words])
