"""Token layout of the unified multimodal sequence."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import LayoutError
from .tensor import Tensor, slice_


@dataclass(frozen=True)
class ModalityLayout:
    """Segment sizes of ``[language | template | search]`` in canonical order."""

    n_lang: int
    n_template: int
    n_search: int

    def __post_init__(self):
        if self.n_lang < 0 or self.n_template < 0:
            raise LayoutError(f"negative segment size in {self}")
        if self.n_search < 1:
            raise LayoutError("search segment must be non-empty")

    @property
    def has_lang(self) -> bool:
        return self.n_lang > 0

    @property
    def has_template(self) -> bool:
        return self.n_template > 0

    @property
    def total(self) -> int:
        return self.n_lang + self.n_template + self.n_search

    def bounds(self, segment: str) -> tuple[int, int]:
        a = self.n_lang
        b = a + self.n_template
        table = {"lang": (0, a), "template": (a, b), "search": (b, b + self.n_search)}
        try:
            return table[segment]
        except KeyError:
            raise LayoutError(f"unknown segment {segment!r}") from None

    def segment_starts(self) -> list[int]:
        """Per-token index of the first token of its segment."""
        out = []
        for seg in ("lang", "template", "search"):
            lo, hi = self.bounds(seg)
            out.extend([lo] * (hi - lo))
        return out

    def check(self, n_tokens: int) -> None:
        if n_tokens != self.total:
            raise LayoutError(f"layout {self} describes {self.total} tokens, sequence has {n_tokens}")


@dataclass
class TokenSequence:
    """Embedded tokens (what the fusion stack consumes) plus the raw features they came from."""

    tokens: Tensor
    features: Tensor
    layout: ModalityLayout

    def __post_init__(self):
        self.layout.check(self.tokens.shape[-2])

    def segment(self, name: str) -> Tensor:
        lo, hi = self.layout.bounds(name)
        return slice_(self.features, (Ellipsis, slice(lo, hi), slice(None)))
