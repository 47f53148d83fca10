"""Flat ``key = value`` run configuration.  Unknown keys are rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..heads import LossWeights


@dataclass
class Config:
    seed: int = 0
    dtype: str = "float32"
    # network
    d_model: int = 64
    d_state: int = 8
    M: int = 4
    inner_ratio: int = 2
    window: int = 8
    conv_width: int = 3
    segment_masked_window: bool = False
    patch: int = 8
    head_hidden: int = 32
    n_invariant: int = 4
    tau: float = 0.1
    # geometry
    image_size: int = 64
    template_size: int = 32
    search_size: int = 64
    template_scale: float = 2.0
    search_scale: float = 4.0
    clip_len: int = 3
    conf_threshold: float = 0.8
    # data
    n_train: int = 300
    n_frames: int = 24
    train_seed_base: int = 0
    eval_seed_base: int = 1_000_000
    n_eval: int = 20
    hard_distractors: bool = False
    # optimisation
    steps: int = 1200
    batch: int = 8
    unroll: int = 2
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup: int = 50
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    jitter_center: float = 0.25
    jitter_scale: float = 0.15
    srf_prob: float = 0.25
    grounding_prob: float = 0.5
    # objective
    tau_c: float = 0.1
    n_intra_neg: int = 8
    n_inter_neg: int = 7
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_bbox: float = 1.0
    lambda_tgt: float = 1.0
    lambda_cls: float = 1.0
    lambda_cw: float = 0.5
    lambda_co: float = 0.5
    # tracking
    srf_prediction_templates: bool = False

    def loss_weights(self) -> LossWeights:
        return LossWeights(l1=self.lambda_l1, giou=self.lambda_giou, bbox=self.lambda_bbox,
                           tgt=self.lambda_tgt, cls=self.lambda_cls, cw=self.lambda_cw, co=self.lambda_co)

    def validate(self) -> "Config":
        for name in ("d_model", "d_state", "M", "patch", "batch", "unroll", "steps", "clip_len",
                     "n_train", "n_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("image_size", "template_size", "search_size"):
            if getattr(self, name) % self.patch:
                raise ConfigError(f"{name}={getattr(self, name)} is not divisible by patch={self.patch}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0.0 <= self.srf_prob <= 1.0 or not 0.0 <= self.grounding_prob <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw).validate()

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw.replace("_", ""))
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def loads(text: str, base: Config | None = None) -> Config:
    types = {f.name: f.type for f in dataclasses.fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    base = base or Config()
    return dataclasses.replace(base, **values).validate()


def load(path: str | Path) -> Config:
    return loads(Path(path).read_text())
