"""Flat parameter storage with named, typed slices.

Every optimizer in the package works on a single real vector. The layout
records which part of that vector belongs to which distribution factor or
weight matrix so proximity statistics know how to read it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError

KINDS = (
    "bernoulli-logit",
    "gaussian-mean",
    "gaussian-log-stddev",
    "weight-matrix",
    "bias",
    "unconstrained",
)
DISTRIBUTION_KINDS = ("bernoulli-logit", "gaussian-mean", "gaussian-log-stddev")


@dataclass(frozen=True)
class Slice:
    """One named block of a flat parameter vector.

    ``prior`` is the Bernoulli prior probability used by the KL statistic;
    it is ignored for every other kind.
    """

    name: str
    kind: str
    offset: int
    shape: tuple
    prior: Optional[float] = None

    @property
    def size(self) -> int:
        return int(prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    slices: tuple = field(default_factory=tuple)

    def __post_init__(self):
        offset = 0
        names = set()
        for s in self.slices:
            if s.kind not in KINDS:
                raise ConfigurationError(f"unknown slice kind {s.kind!r}")
            if s.offset != offset:
                raise ConfigurationError(
                    f"slice {s.name!r} starts at {s.offset}, expected {offset}"
                )
            if s.name in names:
                raise ConfigurationError(f"duplicate slice name {s.name!r}")
            if s.kind == "weight-matrix" and len(s.shape) != 2:
                raise ConfigurationError(f"weight matrix {s.name!r} must be 2-D")
            names.add(s.name)
            offset = s.stop

    @classmethod
    def build(cls, specs: Iterable[tuple]) -> "Layout":
        """Build a contiguous layout from ``(name, kind, shape[, prior])`` tuples."""
        slices = []
        offset = 0
        for spec in specs:
            name, kind, shape = spec[:3]
            prior = spec[3] if len(spec) > 3 else None
            shape = tuple(int(d) for d in np.atleast_1d(shape)) if shape != () else ()
            s = Slice(name, kind, offset, shape, prior)
            slices.append(s)
            offset = s.stop
        return cls(tuple(slices))

    @property
    def size(self) -> int:
        return self.slices[-1].stop if self.slices else 0

    def __getitem__(self, name: str) -> Slice:
        for s in self.slices:
            if s.name == name:
                return s
        raise KeyError(name)

    def of_kind(self, *kinds: str) -> list:
        return [s for s in self.slices if s.kind in kinds]


class ParamVector:
    """A real vector plus the layout describing it.

    ``values`` is always a contiguous 1-D float64 array; :meth:`view` returns
    reshaped views into it (writes go through).
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout):
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != layout.size:
            raise ConfigurationError(
                f"vector of length {values.shape[0]} does not match layout of size {layout.size}"
            )
        self.values = values
        self.layout = layout

    @classmethod
    def from_arrays(cls, blocks: Sequence[tuple]) -> "ParamVector":
        """Pack ``(name, kind, array[, prior])`` blocks into one vector."""
        specs = []
        chunks = []
        for block in blocks:
            name, kind, arr = block[:3]
            arr = np.asarray(arr, dtype=np.float64)
            specs.append((name, kind, arr.shape) + tuple(block[3:]))
            chunks.append(arr.reshape(-1))
        layout = Layout.build(specs)
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def view(self, name: str) -> np.ndarray:
        s = self.layout[name]
        return self.values[s.offset : s.stop].reshape(s.shape)

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        names = ", ".join(f"{s.name}:{s.kind}{list(s.shape)}" for s in self.layout.slices)
        return f"ParamVector({names})"
