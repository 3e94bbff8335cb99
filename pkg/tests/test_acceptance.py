"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line (shown even without ``-s``)
and then asserts, so ``pytest tests/test_acceptance.py`` gives both a summary
and a proper exit status.
"""

import time

import numpy as np
import pytest

from conftest import fit_self_model
from test_dtw_align import brute_force_dtw, random_pair
from test_emotion_decoder import ConstantDecoder, LookupDecoder, directional_fd_errors, one_frame_quad
from test_motor_protocol import TABLE_GOLDEN
from test_self_model import gradient_fd_errors

from facemotor import landmarks as lm
from facemotor.dtw_align import check_path, dtw
from facemotor.emotion_decoder import (EmotionDecoder, build_quads, cross_reconstruction_loss,
                                       self_reconstruction_loss, total_loss)
from facemotor.face_oracle import simulate_landmarks
from facemotor.inverse_solver import retarget_frame
from facemotor.metrics import Calibration, eve, lve, mean_landmark_distance
from facemotor.motor_protocol import (FrameError, decode_servo_frame, default_table, denormalize,
                                      encode_servo_frame, normalize)
from facemotor.pipeline import run_pipeline

START_FRAME_HEX = (
    "4d4641430100070008072003380420031405b004e803e803e803e803e803f401"
    "4006e8031405dc0520034006e803e803e803e8031a047e04e803e803b004b004"
    "b0040000d606b00484039e19")


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def test_dtw_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        a, b = random_pair(rng)
        path = dtw(a, b)
        check_path(path, len(a), len(b))
        worst = max(worst, abs(path.total_cost - brute_force_dtw(a, b)))
    elapsed = time.perf_counter() - t0
    report("dtw oracle equivalence", worst <= 1e-12 and elapsed < 30,
           f"max |dtw - brute| = {worst:.2e}, {elapsed:.1f} s for 1000 pairs")


def test_gradient_fidelity(report, trained_model, corpus):
    rng = np.random.default_rng(77)
    self_errs = gradient_fd_errors(trained_model, rng, n_points=100)
    decoder = EmotionDecoder(seed=11).init(corpus[0].features.shape[1])
    dec_errs = directional_fd_errors(decoder, build_quads(corpus)[:2], rng, n_points=100)
    report("gradient fidelity", self_errs.max() < 1e-4 and dec_errs.max() < 1e-4,
           f"self-model max rel err {self_errs.max():.2e} (100 pts), "
           f"decoder max rel err {dec_errs.max():.2e} (100 pts)")


def test_linear_fixture_exactness(report, linear_model, linear_dataset):
    again = fit_self_model(linear_dataset)
    same = again.to_bytes() == linear_model.to_bytes()
    report("self-model exactness on linear fixture", linear_model.val_mae_ <= 1e-3 and same,
           f"val MAE {linear_model.val_mae_:.2e}, bitwise reproducible: {same}")


def test_retargeting_round_trip(report, trained_model):
    rng = np.random.default_rng(31337)
    hits, monotone, feasible, within_budget = 0, True, True, True
    for _ in range(100):
        target = trained_model.predict(rng.uniform(0.1, 0.9, size=26))
        iterates = []
        rep = retarget_frame(trained_model, target, callback=lambda i, p, loss: iterates.append(p))
        hits += rep.final_loss <= 1e-4
        monotone &= bool(np.all(np.diff(rep.loss_trace) <= 0))
        feasible &= all(np.all((p >= 0) & (p <= 1)) for p in iterates + [rep.final_motor])
        within_budget &= rep.iterations_used <= 500
    report("retargeting round trip", hits >= 95 and monotone and feasible and within_budget,
           f"{hits}/100 reached 1e-4, monotone: {monotone}, feasible: {feasible}")


def test_end_to_end_pipeline(report):
    t0 = time.perf_counter()
    out = run_pipeline(seed=0, n_frames=30)
    elapsed = time.perf_counter() - t0
    table = default_table()
    in_range = True
    for frame in out["frames"]:
        pwms, _ = decode_servo_frame(frame)
        in_range &= len(pwms) == 33 and all(spec.contains(v) for spec, v in zip(table, pwms))
    ok = len(out["frames"]) == 30 and in_range and elapsed < 15 * 60
    report("end-to-end pipeline", ok,
           f"{len(out['frames'])} frames in {elapsed:.1f} s, all PWM in table intervals: {in_range}")


def test_motor_table_fidelity(report):
    table = default_table()
    entries = {s.id: (s.lower_pwm, s.start_pwm, s.upper_pwm) for s in table}
    table_ok = entries == TABLE_GOLDEN
    trips = bad = 0
    for spec in table:
        lo, hi = sorted((spec.lower_pwm, spec.upper_pwm))
        for pwm in range(lo, hi + 1):
            trips += 1
            bad += denormalize(normalize(pwm, spec), spec) != pwm
    report("motor table fidelity", table_ok and bad == 0,
           f"33x3 entries match: {table_ok}, {trips - bad}/{trips} integer round trips exact")


def test_decoupling(report, trained_model, oracle):
    rng = np.random.default_rng(5)
    up, lo = oracle.group_indices("upper"), oracle.group_indices("lower")
    rows_up, rows_lo = oracle.region_indices("upper"), oracle.region_indices("lower")
    jac_zero = oracle_ok = True
    for _ in range(50):
        p, q = rng.uniform(size=26), rng.uniform(size=26)
        J = trained_model.jacobian(p)
        jac_zero &= bool(np.all(J[rows_up][..., lo] == 0) and np.all(J[rows_lo][..., up] == 0))
        for group, rows in ((up, rows_lo), (lo, rows_up)):
            mixed = p.copy()
            mixed[group] = q[group]
            oracle_ok &= np.array_equal(simulate_landmarks(oracle, p)[rows],
                                        simulate_landmarks(oracle, mixed)[rows])
    report("decoupling", jac_zero and oracle_ok,
           f"self-model cross blocks exactly zero: {jac_zero}, oracle bit-identical: {oracle_ok}")


def test_loss_definitions(report, trained_decoder, corpus):
    const = ConstantDecoder([0.5, 0.5])
    a = np.zeros((1, 4))
    gt = np.array([[0.0, 1.0]])
    hand = (abs(cross_reconstruction_loss(const, a, a, gt, gt) - 1.0) <= 1e-12
            and abs(self_reconstruction_loss(ConstantDecoder([0.3]), a, np.array([[0.5]])) - 0.04) <= 1e-12
            and abs(total_loss(const, [one_frame_quad([0.0, 1.0], [0.0, 1.0], [0.3, 0.5])]) - 1.04) <= 1e-12)

    quads = build_quads(corpus)
    table = []
    for q in quads:
        table += [(q.a12, q.a21, q.gt11), (q.a21, q.a12, q.gt22), (q.self_feats, q.self_feats, q.self_gt)]
    zero = total_loss(LookupDecoder(table), quads) == 0.0

    rng = np.random.default_rng(8)
    lc = total_loss(trained_decoder, quads, 1.0, 0.0)
    ls = total_loss(trained_decoder, quads, 0.0, 1.0)
    nonneg = lc >= 0 and ls >= 0
    affine = True
    for l1, l2 in rng.uniform(0, 5, size=(20, 2)):
        val = total_loss(trained_decoder, quads, l1, l2)
        nonneg &= val >= 0
        affine &= abs(val - (l1 * lc + l2 * ls)) <= 1e-12 * max(1.0, abs(val))
    report("loss definitions", hand and zero and nonneg and affine,
           f"hand cases: {hand}, zero at truth: {zero}, non-negative: {nonneg}, affine: {affine}")


def test_wire_protocol(report):
    table = default_table()
    golden = encode_servo_frame([s.start_pwm for s in table], 7).hex() == START_FRAME_HEX
    rng = np.random.default_rng(99)
    round_trip = True
    for _ in range(1000):
        pwms, seq = rng.integers(0, 2001, size=33).tolist(), int(rng.integers(0, 65536))
        round_trip &= decode_servo_frame(encode_servo_frame(pwms, seq)) == (pwms, seq)
    fixtures = [encode_servo_frame([s.start_pwm for s in table], 7), encode_servo_frame([0] * 33, 0)]
    fixtures += [encode_servo_frame(rng.integers(0, 2001, 33).tolist(), i) for i in range(8)]
    flips = caught = 0
    for frame in fixtures:
        for bit in range(len(frame) * 8):
            bad = bytearray(frame)
            bad[bit // 8] ^= 1 << (bit % 8)
            flips += 1
            try:
                decode_servo_frame(bytes(bad))
            except FrameError:
                caught += 1
    report("wire protocol", golden and round_trip and caught == flips,
           f"golden bytes: {golden}, 1000 round trips: {round_trip}, bit flips caught {caught}/{flips}")


def test_metrics(report):
    base = lm.TEMPLATE.copy()
    lip, eye = int(lm.LIP_INDICES[3]), int(lm.EYE_FOREHEAD_INDICES[10])
    static = int(np.flatnonzero(lm.TEMPLATE_REGIONS == lm.REGION_CODE["static"])[0])

    def pinned(i, xy=(0.0, 0.0)):
        out = base.copy()
        out[i] = xy
        return out

    identity = lve(base, base) == eve(base, base) == mean_landmark_distance(base, base) == 0.0
    shifted = base.copy()
    shifted[static] += (0.3, -0.2)
    subset = lve(base, shifted) == 0.0 and eve(base, shifted) == 0.0
    three_four_five = (lve(pinned(lip), pinned(lip, (0.003, 0.004))) == 0.5
                       and eve(pinned(eye), pinned(eye, (0.006, 0.008))) == 1.0)
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(468, 2)), rng.uniform(size=(468, 2))
    linear = all(abs(f(a, b, Calibration(s)) - s * f(a, b, Calibration(1.0))) <= 1e-12 * s * f(a, b, Calibration(1.0))
                 for f in (lve, eve, mean_landmark_distance) for s in (0.5, 7.0, 250.0))
    report("metrics", identity and subset and three_four_five and linear,
           f"identity: {identity}, subset: {subset}, 3-4-5: {three_four_five}, calibration-linear: {linear}")
