"""Sinusoidal position encodings, absolute and signed-relative.

Entry (i, 2k) of a table holds sin(i / 10000^(2k/D)) and entry
(i, 2k+1) holds cos of the same argument. The relative table evaluates
the identical formula at signed distances, so even (sin) columns are an
odd function of the distance and odd (cos) columns an even function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, add

ABSOLUTE = "absolute"
RELATIVE = "relative"


def _encode(positions: np.ndarray, dim: int) -> np.ndarray:
    exponents = np.arange(0, dim, 2, dtype=np.float64) / dim
    inv_freq = 10000.0 ** (-exponents)
    args = positions[:, None] * inv_freq[None, :]
    rows = np.empty((len(positions), dim), dtype=np.float64)
    rows[:, 0::2] = np.sin(args)
    rows[:, 1::2] = np.cos(args)
    return rows


@dataclass(frozen=True)
class SinusoidalTable:
    """Immutable encoding table; freely shared across threads.

    Absolute mode: row i is the encoding of position i, i in [0, n).
    Relative mode: 2K-1 rows ordered from distance +(K-1) down to
    -(K-1), so a query left of its key (negative distance) indexes the
    tail. ``row_of_distance`` maps a signed distance to its row index.
    """

    mode: str
    dim: int
    rows: np.ndarray

    @property
    def max_len(self) -> int:
        if self.mode == ABSOLUTE:
            return self.rows.shape[0]
        return (self.rows.shape[0] + 1) // 2

    def row_of_distance(self, k: int) -> int:
        if self.mode != RELATIVE:
            raise ConfigError("row_of_distance requires a relative table")
        if abs(k) > self.max_len - 1:
            raise ValueError(f"distance {k} outside table range +-{self.max_len - 1}")
        return (self.max_len - 1) - k


def absolute_encoding(n_positions: int, dim: int) -> SinusoidalTable:
    """Encoding rows for absolute positions 0..n_positions-1.

    Deterministic, so a longer table can always be recomputed when an
    input exceeds the current length.
    """
    if dim % 2 != 0:
        raise ConfigError(f"encoding dim must be even, got {dim}")
    if n_positions < 1:
        raise ConfigError(f"n_positions must be >= 1, got {n_positions}")
    positions = np.arange(n_positions, dtype=np.float64)
    return SinusoidalTable(ABSOLUTE, dim, _encode(positions, dim))


def relative_encoding(max_len: int, dim: int) -> SinusoidalTable:
    """Encoding rows for the 2K-1 signed distances of a length-K sequence.

    Distances run from +(K-1) (key far to the left of the query) down to
    -(K-1), giving the contiguous layout the energy shift re-indexing
    relies on.
    """
    if dim % 2 != 0:
        raise ConfigError(f"encoding dim must be even, got {dim}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    distances = np.arange(max_len - 1, -max_len, -1, dtype=np.float64)
    return SinusoidalTable(RELATIVE, dim, _encode(distances, dim))


def grow(table: SinusoidalTable, needed_len: int) -> SinusoidalTable:
    """Return a table covering at least ``needed_len`` positions."""
    if table.max_len >= needed_len:
        return table
    if table.mode == ABSOLUTE:
        return absolute_encoding(needed_len, table.dim)
    return relative_encoding(needed_len, table.dim)


def add_absolute(x: Tensor, table: SinusoidalTable) -> Tensor:
    """Add position encodings elementwise: row i of x gets table row i."""
    if table.mode != ABSOLUTE:
        raise ConfigError("add_absolute requires an absolute-mode table")
    n, d = x.shape
    if d != table.dim:
        raise ShapeError(f"encoding dim {table.dim} does not match input width {d}")
    if n > table.rows.shape[0]:
        raise ShapeError(f"table has {table.rows.shape[0]} rows, input has {n}")
    return add(x, Tensor(table.rows[:n]))
