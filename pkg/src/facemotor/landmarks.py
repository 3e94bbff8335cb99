"""468-point landmark template, region labels and landmark sequence I/O.

Landmark sets are plain ``(468, 2)`` float arrays in normalized image
coordinates (x right, y down). The template face below is the neutral layout
shared by the simulated face and the blendshape rig.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ._io import FormatError, Reader, Writer

N_LANDMARKS = 468

REGIONS = ("upper", "lower", "static")
REGION_CODE = {name: i for i, name in enumerate(REGIONS)}

# name, count, region
_PARTS = (
    ("outline", 64, "static"),
    ("forehead", 60, "upper"),
    ("brows", 24, "upper"),
    ("eyes", 48, "upper"),
    ("nose", 40, "upper"),
    ("temples", 60, "static"),
    ("cheeks", 80, "lower"),
    ("lips", 44, "lower"),
    ("chin", 48, "lower"),
)


def _ellipse(n, cx, cy, rx, ry, t0=0.0, t1=2 * np.pi, endpoint=False):
    t = np.linspace(t0, t1, n, endpoint=endpoint)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _grid(nx, ny, x0, x1, y0, y1):
    xs, ys = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _build_template():
    pts = {
        "outline": _ellipse(64, 0.5, 0.5, 0.34, 0.42),
        "forehead": _grid(12, 5, 0.3, 0.7, 0.16, 0.28),
        "brows": np.concatenate([
            _ellipse(12, 0.36, 0.36, 0.09, 0.03, np.pi * 1.1, np.pi * 1.9, True),
            _ellipse(12, 0.64, 0.36, 0.09, 0.03, np.pi * 1.1, np.pi * 1.9, True),
        ]),
        "eyes": np.concatenate([
            _ellipse(16, 0.36, 0.42, 0.06, 0.025),
            _ellipse(8, 0.36, 0.42, 0.015, 0.015),
            _ellipse(16, 0.64, 0.42, 0.06, 0.025),
            _ellipse(8, 0.64, 0.42, 0.015, 0.015),
        ]),
        "nose": np.concatenate([
            _grid(2, 12, 0.47, 0.53, 0.44, 0.58),
            _ellipse(16, 0.5, 0.6, 0.06, 0.02, 0.0, np.pi, True),
        ]),
        "temples": np.concatenate([
            _grid(3, 10, 0.2, 0.26, 0.3, 0.62),
            _grid(3, 10, 0.74, 0.8, 0.3, 0.62),
        ]),
        "cheeks": np.concatenate([
            _grid(5, 8, 0.29, 0.41, 0.5, 0.68),
            _grid(5, 8, 0.59, 0.71, 0.5, 0.68),
        ]),
        "lips": np.concatenate([
            _ellipse(24, 0.5, 0.73, 0.1, 0.04),
            _ellipse(20, 0.5, 0.73, 0.07, 0.015),
        ]),
        "chin": np.concatenate([
            _grid(8, 3, 0.36, 0.64, 0.8, 0.86),
            _ellipse(24, 0.5, 0.62, 0.22, 0.27, np.pi * 0.15, np.pi * 0.85, True),
        ]),
    }
    coords, labels, slices = [], [], {}
    start = 0
    for name, count, region in _PARTS:
        block = pts[name]
        assert block.shape == (count, 2), name
        coords.append(block)
        labels += [REGION_CODE[region]] * count
        slices[name] = np.arange(start, start + count)
        start += count
    assert start == N_LANDMARKS
    return np.concatenate(coords), np.array(labels, dtype=np.int64), slices


TEMPLATE, TEMPLATE_REGIONS, PART_INDICES = _build_template()
TEMPLATE.setflags(write=False)
TEMPLATE_REGIONS.setflags(write=False)

LIP_INDICES = PART_INDICES["lips"]
EYE_FOREHEAD_INDICES = np.concatenate(
    [PART_INDICES["forehead"], PART_INDICES["brows"], PART_INDICES["eyes"]]
)


def check_landmarks(points, name="landmarks") -> np.ndarray:
    a = np.asarray(points, dtype=float)
    if a.shape == (2 * N_LANDMARKS,):
        a = a.reshape(N_LANDMARKS, 2)
    if a.shape != (N_LANDMARKS, 2):
        raise ValueError(f"{name}: expected ({N_LANDMARKS}, 2) points, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite coordinates")
    return a


def check_index_set(indices, name="index set") -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValueError(f"empty {name}")
    if idx.min() < 0 or idx.max() >= N_LANDMARKS:
        raise ValueError(f"{name} has indices outside [0, {N_LANDMARKS})")
    return idx


# -- sequences ---------------------------------------------------------------

def write_landmarks_csv(path, frames) -> None:
    frames = np.asarray(frames, dtype=float).reshape(-1, N_LANDMARKS, 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "index", "x", "y"])
        for t, pts in enumerate(frames):
            for i, (x, y) in enumerate(pts):
                w.writerow([t, i, repr(float(x)), repr(float(y))])


def read_landmarks_csv(path) -> np.ndarray:
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows[(int(rec["frame"]), int(rec["index"]))] = (float(rec["x"]), float(rec["y"]))
    if not rows:
        raise ValueError(f"{path}: no landmark rows")
    n_frames = max(k[0] for k in rows) + 1
    out = np.full((n_frames, N_LANDMARKS, 2), np.nan)
    for (t, i), xy in rows.items():
        if not 0 <= i < N_LANDMARKS:
            raise ValueError(f"{path}: landmark index {i} out of range")
        out[t, i] = xy
    if np.isnan(out).any():
        raise ValueError(f"{path}: incomplete frames")
    return out


def landmarks_to_bytes(frames) -> bytes:
    frames = np.asarray(frames, dtype=float).reshape(-1, N_LANDMARKS, 2)
    w = Writer(b"LSEQ")
    w.u32(frames.shape[0])
    w.u32(N_LANDMARKS)
    w.floats(frames)
    return w.getvalue()


def landmarks_from_bytes(data: bytes) -> np.ndarray:
    r = Reader(data, b"LSEQ")
    n, m = r.u32(), r.u32()
    if m != N_LANDMARKS:
        raise FormatError(f"expected {N_LANDMARKS} landmarks per frame, got {m}")
    out = r.floats((n, m, 2))
    r.done()
    return out


def save_landmarks(path, frames) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        write_landmarks_csv(path, frames)
    else:
        path.write_bytes(landmarks_to_bytes(frames))


def load_landmarks(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return read_landmarks_csv(path)
    return landmarks_from_bytes(path.read_bytes())
