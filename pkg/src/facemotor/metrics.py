"""Landmark error metrics in millimetres.

LVE and EVE are the maximum per-vertex L2 error over the lip and the
eye/forehead index sets respectively, evaluated on 2D landmarks and scaled by
a fixed calibration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import landmarks as lm


@dataclass(frozen=True)
class Calibration:
    mm_per_unit: float = 100.0

    def __post_init__(self):
        if not (np.isfinite(self.mm_per_unit) and self.mm_per_unit > 0):
            raise ValueError("mm_per_unit must be strictly positive")


DEFAULT_CALIBRATION = Calibration()


def _point_errors(gt, pred):
    a = lm.check_landmarks(gt, "gt")
    b = lm.check_landmarks(pred, "pred")
    return np.linalg.norm(a - b, axis=1)


def max_vertex_error(gt, pred, indices, calib: Calibration = DEFAULT_CALIBRATION) -> float:
    idx = lm.check_index_set(indices)
    return float(_point_errors(gt, pred)[idx].max() * calib.mm_per_unit)


def lve(gt, pred, calib: Calibration = DEFAULT_CALIBRATION, lip_indices=None) -> float:
    idx = lm.LIP_INDICES if lip_indices is None else lip_indices
    return max_vertex_error(gt, pred, idx, calib)


def eve(gt, pred, calib: Calibration = DEFAULT_CALIBRATION, eye_forehead_indices=None) -> float:
    idx = lm.EYE_FOREHEAD_INDICES if eye_forehead_indices is None else eye_forehead_indices
    return max_vertex_error(gt, pred, idx, calib)


def mean_landmark_distance(gt, pred, calib: Calibration = DEFAULT_CALIBRATION) -> float:
    return float(_point_errors(gt, pred).mean() * calib.mm_per_unit)


def evaluate_sequence(gt_frames, pred_frames, calib: Calibration = DEFAULT_CALIBRATION,
                      lip_indices=None, eye_forehead_indices=None) -> dict:
    gt_frames = np.asarray(gt_frames, dtype=float).reshape(-1, lm.N_LANDMARKS, 2)
    pred_frames = np.asarray(pred_frames, dtype=float).reshape(-1, lm.N_LANDMARKS, 2)
    if len(gt_frames) != len(pred_frames):
        raise ValueError(f"frame count mismatch: {len(gt_frames)} vs {len(pred_frames)}")
    per_frame = [
        {
            "frame": t,
            "lve_mm": lve(g, p, calib, lip_indices),
            "eve_mm": eve(g, p, calib, eye_forehead_indices),
            "mae_mm": mean_landmark_distance(g, p, calib),
        }
        for t, (g, p) in enumerate(zip(gt_frames, pred_frames))
    ]
    summary = {k: float(np.mean([f[k] for f in per_frame])) for k in ("lve_mm", "eve_mm", "mae_mm")}
    return {"frames": len(per_frame), "mm_per_unit": calib.mm_per_unit, **summary,
            "per_frame": per_frame}
