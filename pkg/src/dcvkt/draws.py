"""Shifted and shuffled Halton draws for the three household-level random terms."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri

# (beta, alpha, eta) use these bases, in this order.
BASES = (2, 3, 5)
BURN_IN = 10

_MAGIC = b"DCVKTDRW"
_HEADER = struct.Struct("<8sIQQqQ")  # magic, version, N, R, seed, dims
_VERSION = 1


def halton(index: int, base: int) -> float:
    """Radical inverse of ``index`` in ``base``."""
    if index < 1:
        raise ValueError("index must be >= 1")
    x, f = 0.0, 1.0 / base
    while index > 0:
        index, digit = divmod(index, base)
        x += digit * f
        f /= base
    return x


def halton_sequence(n_points: int, base: int, start: int = 1) -> np.ndarray:
    """Radical inverses of ``start, ..., start + n_points - 1``."""
    idx = np.arange(start, start + n_points, dtype=np.int64)
    out = np.zeros(n_points)
    f = 1.0 / base
    while np.any(idx > 0):
        idx, digit = np.divmod(idx, base)
        out += digit * f
        f /= base
    return out


def shifted_shuffled_sequence(n_points: int, base: int, seed=None, *,
                              shift: float | None = None, shuffle: bool = True,
                              burn_in: int = BURN_IN) -> np.ndarray:
    """Halton points with a uniform shift (mod 1) and a random reordering.

    ``seed`` may be an int or a ``numpy.random.Generator``. Passing
    ``shift=0.0, shuffle=False`` returns the plain sequence after burn-in.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = halton_sequence(n_points, base, start=burn_in + 1)
    if shift is None:
        shift = rng.random()
    x = np.mod(x + shift, 1.0)
    # keep the open interval: a shifted point can land exactly on 0
    x[x <= 0.0] = np.nextafter(0.0, 1.0)
    if shuffle:
        x = x[rng.permutation(n_points)]
    return x


def to_standard_normal(u):
    """Inverse standard-normal CDF on the open unit interval."""
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise ValueError("to_standard_normal needs 0 < u < 1")
    z = ndtri(u)
    return float(z) if z.ndim == 0 else z


@dataclass(frozen=True)
class DrawSet:
    """Standard-normal draws shaped (households, R, 3) in (beta, alpha, eta) order."""

    draws: np.ndarray
    seed: int

    @property
    def n_households(self) -> int:
        return self.draws.shape[0]

    @property
    def R(self) -> int:
        return self.draws.shape[1]

    @property
    def beta(self) -> np.ndarray:
        return self.draws[:, :, 0]

    @property
    def alpha(self) -> np.ndarray:
        return self.draws[:, :, 1]

    @property
    def eta(self) -> np.ndarray:
        return self.draws[:, :, 2]

    def subset(self, idx) -> "DrawSet":
        return DrawSet(self.draws[np.asarray(idx)], self.seed)

    def save(self, path: str | Path) -> None:
        """Little-endian dump: header (magic, version, N, R, seed, dims) then float64 data."""
        n, r, d = self.draws.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, n, r, int(self.seed), d))
            fh.write(np.ascontiguousarray(self.draws, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "DrawSet":
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            magic, version, n, r, seed, d = _HEADER.unpack(head)
            if magic != _MAGIC or version != _VERSION:
                raise ValueError(f"{path}: not a draw file")
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != n * r * d:
            raise ValueError(f"{path}: truncated draw file")
        return cls(data.reshape(n, r, d).astype(float), seed)


def make_drawset(n_households: int, R: int, seed: int) -> DrawSet:
    """Per dimension, N*R shifted Halton points are permuted and dealt out R
    per household; each dimension has its own shift and permutation."""
    rng = np.random.default_rng(seed)
    cols = []
    for base in BASES:
        u = shifted_shuffled_sequence(n_households * R, base, rng)
        cols.append(to_standard_normal(u).reshape(n_households, R))
    return DrawSet(np.stack(cols, axis=-1), seed)
