"""Linear blendshape rig: 33 coefficients -> 468 landmarks.

The default rig is derived from a face oracle. Each blendshape is assigned a
sparse motor pattern (one motor, or a left/right pair) and its displacement
field is the oracle's first-order response to that pattern around the
neutral pose, so every blendshape target lies close to what the face can
actually reach.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import landmarks as lm
from ._io import FormatError, Reader, Writer
from .face_oracle import FaceOracle, simulate_landmarks
from .motor_protocol import default_table

N_BLENDSHAPES = 33
MAGIC = b"BRIG"
VERSION = 1

# left/right motor pairs (control table ids) that make up blendshapes 26..32
SYMMETRIC_PAIRS = ((3, 28), (4, 27), (5, 26), (6, 25), (9, 22), (14, 19), (1, 30))
PATTERN_REACH = 0.6


def check_coeffs(coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=float)
    if c.shape != (N_BLENDSHAPES,):
        raise ValueError(f"expected {N_BLENDSHAPES} blendshape coefficients, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite blendshape coefficient")
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("blendshape coefficient outside [0, 1]")
    return c


@dataclass(frozen=True, eq=False, repr=False)
class BlendshapeRig(TransformerMixin, BaseEstimator):
    base: np.ndarray                   # (468, 2)
    deltas: np.ndarray                 # (33, 468, 2)
    lip_indices: np.ndarray = lm.LIP_INDICES
    eye_forehead_indices: np.ndarray = lm.EYE_FOREHEAD_INDICES
    patterns: np.ndarray | None = None  # (33, 26) motor offsets that define each delta

    def __post_init__(self):
        if self.deltas.shape != (N_BLENDSHAPES, lm.N_LANDMARKS, 2):
            raise ValueError(f"deltas must have shape (33, 468, 2), got {self.deltas.shape}")
        lm.check_landmarks(self.base, "rig base")
        if np.intersect1d(self.lip_indices, self.eye_forehead_indices).size:
            raise ValueError("lip and eye/forehead index sets overlap")

    def __repr__(self):
        return f"BlendshapeRig(n_shapes={len(self.deltas)})"

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([rig_landmarks(self, c) for c in X])

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        w.u32(N_BLENDSHAPES)
        w.u32(lm.N_LANDMARKS)
        w.floats(self.base)
        w.floats(self.deltas)
        for idx in (self.lip_indices, self.eye_forehead_indices):
            w.u32(len(idx))
            w.ints(idx, "<u4")
        has_patterns = self.patterns is not None
        w.u8(int(has_patterns))
        if has_patterns:
            w.array(self.patterns)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlendshapeRig":
        r = Reader(data, MAGIC, (VERSION,))
        k, n = r.u32(), r.u32()
        if (k, n) != (N_BLENDSHAPES, lm.N_LANDMARKS):
            raise FormatError(f"unexpected rig dimensions {k}x{n}")
        base = r.floats((n, 2))
        deltas = r.floats((k, n, 2))
        lips = r.ints((r.u32(),), "<u4")
        eyes = r.ints((r.u32(),), "<u4")
        patterns = r.array() if r.u8() else None
        r.done()
        return cls(base, deltas, lips, eyes, patterns)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BlendshapeRig":
        return cls.from_bytes(Path(path).read_bytes())


def rig_landmarks(rig: BlendshapeRig, coeffs) -> np.ndarray:
    c = check_coeffs(coeffs)
    return rig.base + np.tensordot(c, rig.deltas, axes=1)


def default_patterns() -> np.ndarray:
    """Motor offsets (33, 26) from the neutral pose, one row per blendshape.

    Rows 0..25 move a single expression motor toward the far end of its range;
    rows 26..32 move a symmetric pair together.
    """
    table = default_table()
    neutral = table.neutral_vector()
    ids = table.expression_ids
    far = np.where(neutral <= 0.5, 1.0, 0.0)
    single = np.diag(PATTERN_REACH * (far - neutral))
    pairs = np.zeros((len(SYMMETRIC_PAIRS), len(ids)))
    for row, (a, b) in enumerate(SYMMETRIC_PAIRS):
        for mid in (a, b):
            j = ids.index(mid)
            pairs[row, j] = single[j, j]
    return np.vstack([single, pairs])


def build_default_rig(oracle: FaceOracle) -> BlendshapeRig:
    neutral = default_table().neutral_vector()
    patterns = default_patterns()
    jac = oracle.jacobian(neutral)                 # (468, 2, 26)
    deltas = np.einsum("icm,km->kic", jac, patterns)
    base = simulate_landmarks(oracle, neutral)
    return BlendshapeRig(base=base, deltas=deltas, patterns=patterns)


# coefficient sequences on disk: header ``frame,b00..b32``, one row per frame

COEFF_COLUMNS = [f"b{k:02d}" for k in range(N_BLENDSHAPES)]


def write_coeffs_csv(path, frames) -> None:
    frames = np.asarray(frames, dtype=float).reshape(-1, N_BLENDSHAPES)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", *COEFF_COLUMNS])
        for t, row in enumerate(frames):
            w.writerow([t, *(repr(float(v)) for v in row)])


def read_coeffs_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no coefficient rows")
    missing = [c for c in COEFF_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"{path}: missing columns {missing[:3]}...")
    rows.sort(key=lambda r: int(r["frame"]))
    return np.stack([check_coeffs([float(r[c]) for c in COEFF_COLUMNS]) for r in rows])
