"""End-to-end run: synthetic speech features -> blendshapes -> motors -> servo frames."""

from __future__ import annotations

import time

import numpy as np

from .blendshape_rig import build_default_rig, rig_landmarks
from .emotion_decoder import EmotionDecoder, SyntheticCorpus
from .face_oracle import build_oracle
from .inverse_solver import SolverOptions, retarget_sequence
from .motor_protocol import default_table, encode_servo_frame
from .self_model import SelfModel, generate_dataset


def run_pipeline(seed=0, n_frames=30, dataset_size=5000, self_model_params=None,
                 decoder_params=None, solver_options=None) -> dict:
    """Train everything from scratch and drive the face for ``n_frames`` frames.

    Returns the intermediate products and wall-clock timings.
    """
    t0 = time.perf_counter()
    timings = {}

    corpus_gen = SyntheticCorpus(seed)
    decoder = EmotionDecoder(seed=seed, **(decoder_params or {})).fit(corpus_gen.samples())
    timings["decoder"] = time.perf_counter() - t0

    features = corpus_gen.render_features(0, 1, n_frames)
    coeffs = decoder.predict(features)

    oracle = build_oracle(seed)
    rig = build_default_rig(oracle)
    data = generate_dataset(oracle, dataset_size, seed + 1)
    t1 = time.perf_counter()
    model = SelfModel(seed=seed, **(self_model_params or {})).fit(
        data.motors, data.landmarks, data.region_mask, data.motor_groups)
    timings["self_model"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    targets = [rig_landmarks(rig, c) for c in coeffs]
    reports = retarget_sequence(model, targets, solver_options or SolverOptions())
    timings["retarget"] = time.perf_counter() - t2

    table = default_table()
    commands = [table.to_full_command(r.final_motor) for r in reports]
    frames = [encode_servo_frame(cmd, t) for t, cmd in enumerate(commands)]
    timings["total"] = time.perf_counter() - t0
    return {
        "coeffs": coeffs,
        "targets": np.stack(targets),
        "reports": reports,
        "commands": commands,
        "frames": frames,
        "decoder": decoder,
        "self_model": model,
        "timings": timings,
    }
