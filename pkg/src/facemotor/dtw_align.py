"""Dynamic time warping with Euclidean frame cost.

Steps are (i+1, j), (i, j+1) and (i+1, j+1). The full cumulative cost
matrix is filled by dynamic programming; an optional Sakoe-Chiba band limits
``|i - j|`` for long inputs. On traceback, ties prefer the diagonal
predecessor, then (i-1, j), then (i, j-1).

``.fseq`` layout (little-endian): magic ``FSEQ``, u16 version, u32 D,
u32 T, f64 frame rate, then T*D f64 values in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import Reader, Writer


@dataclass(eq=False)
class FeatureSequence:
    frames: np.ndarray          # (T, D)
    frame_rate: float = 30.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[1] < 1:
            raise ValueError(f"frames must be (T, D) with D >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite feature values")
        self.frames = f

    def __len__(self):
        return len(self.frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def to_bytes(self) -> bytes:
        w = Writer(b"FSEQ")
        w.u32(self.dim)
        w.u32(len(self))
        w.f64(self.frame_rate)
        w.floats(self.frames)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureSequence":
        r = Reader(data, b"FSEQ")
        d, t = r.u32(), r.u32()
        rate = r.f64()
        frames = r.floats((t, d))
        r.done()
        return cls(frames, rate)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureSequence":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class AlignmentPath:
    pairs: list
    total_cost: float

    def __len__(self):
        return len(self.pairs)

    def to_json(self) -> str:
        return json.dumps({"pairs": [list(p) for p in self.pairs], "total_cost": self.total_cost})

    @classmethod
    def from_json(cls, text: str) -> "AlignmentPath":
        raw = json.loads(text)
        return cls([tuple(p) for p in raw["pairs"]], float(raw["total_cost"]))


def _as_frames(seq) -> np.ndarray:
    if isinstance(seq, FeatureSequence):
        return seq.frames
    return FeatureSequence(seq).frames


def cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def dtw(s_a, s_b, band: int | None = None) -> AlignmentPath:
    a, b = _as_frames(s_a), _as_frames(s_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sequence")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n, m = len(a), len(b)
    if band is not None and band < abs(n - m):
        raise ValueError(f"band {band} cannot connect lengths {n} and {m}")
    d = cost_matrix(a, b)

    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        lo, hi = 1, m
        if band is not None:
            lo, hi = max(1, i - band), min(m, i + band)
        for j in range(lo, hi + 1):
            acc[i, j] = d[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])

    i, j = n, m
    pairs = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        # first minimum wins: diagonal, then (i-1, j), then (i, j-1)
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        pairs.append((i - 1, j - 1))
    pairs.reverse()
    # re-sum along the path so total_cost matches the pairs exactly
    total = float(sum(d[p] for p in pairs))
    return AlignmentPath(pairs, total)


def check_path(path: AlignmentPath, len_a: int, len_b: int) -> None:
    p = path.pairs
    if not p or tuple(p[0]) != (0, 0) or tuple(p[-1]) != (len_a - 1, len_b - 1):
        raise ValueError("path must run from (0, 0) to the last frame pair")
    for (i0, j0), (i1, j1) in zip(p[:-1], p[1:]):
        if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
            raise ValueError(f"invalid step {(i0, j0)} -> {(i1, j1)}")


def warp_to_reference(seq, path: AlignmentPath, side: str) -> FeatureSequence:
    """One output frame per path step, taken from the chosen side of each pair."""
    if side not in ("a", "b"):
        raise ValueError("side must be 'a' or 'b'")
    rate = seq.frame_rate if isinstance(seq, FeatureSequence) else 30.0
    frames = _as_frames(seq)
    col = 0 if side == "a" else 1
    idx = np.array([p[col] for p in path.pairs], dtype=np.int64)
    if idx.size == 0 or idx.max() >= len(frames) or idx.min() < 0:
        raise IndexError("alignment path indexes outside the sequence")
    return FeatureSequence(frames[idx], rate)


def warp_array(values, path: AlignmentPath, side: str) -> np.ndarray:
    """Like warp_to_reference for arbitrary per-frame arrays (e.g. blendshapes)."""
    values = np.asarray(values)
    col = 0 if side == "a" else 1
    idx = np.array([p[col] for p in path.pairs], dtype=np.int64)
    if idx.max() >= len(values):
        raise IndexError("alignment path indexes outside the sequence")
    return values[idx]
