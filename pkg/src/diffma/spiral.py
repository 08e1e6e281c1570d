"""Spiral serialization of a 2D patch grid.

Eight schemes come from four starting corners times two winding directions.
Each scheme has a forward mode (boundary inward) and a reverse mode (the same
path walked backwards). Grid cells are identified by their row-major index
``r * W + c``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

NUM_SCHEMES = 8


class Corner(enum.IntEnum):
    TOP_LEFT = 0
    TOP_RIGHT = 1
    BOTTOM_RIGHT = 2
    BOTTOM_LEFT = 3


class Chirality(enum.IntEnum):
    CLOCKWISE = 0
    COUNTERCLOCKWISE = 1


class Mode(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


# (dr, dc) in clockwise order: right, down, left, up
_DIRS = ((0, 1), (1, 0), (0, -1), (-1, 0))

# index into _DIRS of the first step for (corner, chirality)
_FIRST_DIR = {
    (Corner.TOP_LEFT, Chirality.CLOCKWISE): 0,
    (Corner.TOP_LEFT, Chirality.COUNTERCLOCKWISE): 1,
    (Corner.TOP_RIGHT, Chirality.CLOCKWISE): 1,
    (Corner.TOP_RIGHT, Chirality.COUNTERCLOCKWISE): 2,
    (Corner.BOTTOM_RIGHT, Chirality.CLOCKWISE): 2,
    (Corner.BOTTOM_RIGHT, Chirality.COUNTERCLOCKWISE): 3,
    (Corner.BOTTOM_LEFT, Chirality.CLOCKWISE): 3,
    (Corner.BOTTOM_LEFT, Chirality.COUNTERCLOCKWISE): 0,
}


@dataclass(frozen=True)
class ScanScheme:
    corner: Corner
    chirality: Chirality
    mode: Mode = Mode.FORWARD

    @classmethod
    def from_id(cls, scheme_id: int, mode: Mode = Mode.FORWARD) -> "ScanScheme":
        if not 0 <= scheme_id < NUM_SCHEMES:
            raise ValueError(f"scheme_id must be in [0, {NUM_SCHEMES - 1}], got {scheme_id}")
        return cls(Corner(scheme_id // 2), Chirality(scheme_id % 2), mode)

    @property
    def scheme_id(self) -> int:
        return 2 * int(self.corner) + int(self.chirality)

    def reversed(self) -> "ScanScheme":
        mode = Mode.REVERSE if self.mode is Mode.FORWARD else Mode.FORWARD
        return ScanScheme(self.corner, self.chirality, mode)


@dataclass(frozen=True, eq=False)
class Permutation:
    """``order[pos]`` is the grid index visited at sequence position ``pos``;
    ``inverse[g]`` is the position at which grid index ``g`` is visited."""

    order: np.ndarray
    inverse: np.ndarray

    def __len__(self) -> int:
        return len(self.order)

    @classmethod
    def from_order(cls, order) -> "Permutation":
        order = np.asarray(order, dtype=np.int64)
        if not np.array_equal(np.sort(order), np.arange(len(order))):
            raise ValueError("order is not a permutation of 0..L-1")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        order.setflags(write=False)
        inverse.setflags(write=False)
        return cls(order, inverse)

    @classmethod
    def identity(cls, L: int) -> "Permutation":
        return cls.from_order(np.arange(L))


def _corner_cell(H: int, W: int, corner: Corner) -> tuple[int, int]:
    return {
        Corner.TOP_LEFT: (0, 0),
        Corner.TOP_RIGHT: (0, W - 1),
        Corner.BOTTOM_RIGHT: (H - 1, W - 1),
        Corner.BOTTOM_LEFT: (H - 1, 0),
    }[corner]


def _walk(H: int, W: int, corner: Corner, chirality: Chirality) -> np.ndarray:
    # go straight until blocked by the border or a visited cell, then turn
    turn = 1 if chirality is Chirality.CLOCKWISE else -1
    visited = np.zeros((H, W), dtype=bool)
    r, c = _corner_cell(H, W, corner)
    k = _FIRST_DIR[(corner, chirality)]
    order = [r * W + c]
    visited[r, c] = True
    while len(order) < H * W:
        for _ in range(2):
            dr, dc = _DIRS[k]
            nr, nc = r + dr, c + dc
            if 0 <= nr < H and 0 <= nc < W and not visited[nr, nc]:
                break
            k = (k + turn) % 4
        else:  # pragma: no cover - unreachable for rectangular grids
            raise RuntimeError("spiral walk got stuck")
        r, c = nr, nc
        visited[r, c] = True
        order.append(r * W + c)
    return np.asarray(order, dtype=np.int64)


@lru_cache(maxsize=None)
def build_spiral(H: int, W: int, scheme: ScanScheme) -> Permutation:
    """Spiral ordering of an ``H x W`` grid for ``scheme``. Cached per arguments."""
    if H < 1 or W < 1:
        raise ValueError(f"grid must be at least 1x1, got {H}x{W}")
    order = _walk(H, W, scheme.corner, scheme.chirality)
    if scheme.mode is Mode.REVERSE:
        order = order[::-1].copy()
    return Permutation.from_order(order)


def scheme_for_block(i: int) -> tuple[ScanScheme, ScanScheme]:
    """Forward and reverse modes of the scheme assigned to block ``i`` (``i mod 8``)."""
    if i < 0:
        raise ValueError(f"block index must be >= 0, got {i}")
    fwd = ScanScheme.from_id(i % NUM_SCHEMES)
    return fwd, fwd.reversed()


def all_schemes() -> list[ScanScheme]:
    """All 16 scheme/mode combinations."""
    return [ScanScheme.from_id(k, m) for k in range(NUM_SCHEMES) for m in Mode]


def apply_permutation(x, p: Permutation):
    """Reorder the token axis (second to last) of ``x`` into scan order."""
    _check_length(x, p)
    return x[..., _index(p.order, x), :]


def invert_permutation(y, p: Permutation):
    """Restore grid (row-major) order after a scan."""
    _check_length(y, p)
    return y[..., _index(p.inverse, y), :]


def _check_length(x, p: Permutation) -> None:
    if x.shape[-2] != len(p):
        raise ValueError(f"sequence length {x.shape[-2]} != permutation length {len(p)}")


def _index(idx: np.ndarray, like):
    if isinstance(like, np.ndarray):
        return idx
    import torch

    return torch.tensor(idx, device=like.device)


def visit_ranks(H: int, W: int, scheme: ScanScheme) -> np.ndarray:
    """``H x W`` matrix holding the sequence position at which each cell is visited."""
    return build_spiral(H, W, scheme).inverse.reshape(H, W).copy()


def format_ranks(ranks: np.ndarray) -> str:
    width = len(str(ranks.max()))
    return "\n".join(" ".join(f"{v:>{width}d}" for v in row) for row in ranks)
