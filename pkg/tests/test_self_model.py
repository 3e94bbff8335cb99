import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from conftest import fit_self_model
from facemotor._io import rng_for
from facemotor.face_oracle import simulate_landmarks
from facemotor.self_model import (Dataset, SelfModel, TrainConfig, _init_layers, generate_dataset,
                                  l1_landmark_loss, loss_gradient_wrt_input, predict,
                                  train_self_model)

points = arrays(np.float64, (468, 2), elements=st.floats(0, 1))


# -- dataset -------------------------------------------------------------------

def test_dataset_deterministic(oracle, dataset, tmp_path):
    again = generate_dataset(oracle, 5000, 7)
    a, b = tmp_path / "a.fdst", tmp_path / "b.fdst"
    dataset.save(a)
    again.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == b"FDST"


def test_dataset_single_sample(oracle):
    d = generate_dataset(oracle, 1, 3)
    assert d.count == 1
    assert np.array_equal(d.landmarks[0], simulate_landmarks(oracle, d.motors[0]))


def test_dataset_motor_statistics(dataset):
    assert np.all((dataset.motors >= 0) & (dataset.motors <= 1))
    mean = dataset.motors.mean(axis=0)
    assert np.all((mean >= 0.47) & (mean <= 0.53))


def test_dataset_samples_independent_of_count(oracle):
    small, big = generate_dataset(oracle, 5, 11), generate_dataset(oracle, 12, 11)
    assert np.array_equal(small.motors, big.motors[:5])


def test_dataset_count_zero(oracle):
    with pytest.raises(ValueError):
        generate_dataset(oracle, 0, 1)


def test_dataset_round_trip(oracle, tmp_path):
    d = generate_dataset(oracle, 20, 2)
    d.save(tmp_path / "d.fdst")
    back = Dataset.load(tmp_path / "d.fdst")
    assert back.oracle_hash == oracle.fingerprint()
    assert back.seed == 2 and back.count == 20
    assert np.array_equal(back.motors, d.motors) and np.array_equal(back.landmarks, d.landmarks)


# -- loss ----------------------------------------------------------------------

def test_l1_examples():
    a = np.zeros((468, 2))
    assert l1_landmark_loss(a, a) == 0.0
    b = a.copy()
    b[17] = (0.3, -0.4)
    assert l1_landmark_loss(a, b) == pytest.approx(0.7 / 468, abs=1e-18)


@settings(max_examples=30)
@given(points, points)
def test_l1_symmetric(a, b):
    assert l1_landmark_loss(a, b) == l1_landmark_loss(b, a)
    assert l1_landmark_loss(a, b) >= 0


def test_l1_size_mismatch():
    with pytest.raises(ValueError):
        l1_landmark_loss(np.zeros((468, 2)), np.zeros((467, 2)))


# -- training ------------------------------------------------------------------

def test_zero_epochs_equals_initialization(dataset):
    model = fit_self_model(dataset, hidden=(8, 8), epochs=0)
    for b, name in enumerate(("upper", "lower")):
        br = model.branches_[name]
        expect = _init_layers(rng_for(0, 1, b), [len(br["cols"]), 8, 8, 2 * len(br["rows"])])
        for (W, bias), (W0, b0) in zip(br["layers"], expect):
            assert np.array_equal(W, W0) and np.array_equal(bias, b0)
    assert model.history_ == []
    n_val = int(round(0.1 * dataset.count))
    val = np.sort(rng_for(0, 3).permutation(dataset.count)[:n_val])
    assert model.val_mae_ == model.score_l1(dataset.motors[val], dataset.landmarks[val])


def test_init_bounds(dataset):
    model = fit_self_model(dataset, hidden=(8,), epochs=0)
    W = model.branches_["upper"]["layers"][0][0]
    assert np.abs(W).max() <= 1 / np.sqrt(W.shape[0])


def test_training_bitwise_reproducible(dataset):
    a = fit_self_model(dataset, hidden=(16,), epochs=2)
    b = fit_self_model(dataset, hidden=(16,), epochs=2)
    assert a.to_bytes() == b.to_bytes()


def test_full_batch_gd_monotone(linear_oracle):
    d = generate_dataset(linear_oracle, 400, 3)
    params = dict(hidden=(32,), learning_rate=10.0, batch_size=400, momentum=0.0,
                  validation_fraction=0.0)
    start = fit_self_model(d, epochs=0, **params).train_mae_
    hist = [start] + fit_self_model(d, epochs=30, **params).history_
    assert np.all(np.diff(hist) <= 0)
    assert hist[-1] < hist[0]


def test_linear_fixture_mae(linear_model):
    assert linear_model.val_mae_ <= 1e-3


def test_nonlinear_model_beats_mean_predictor(trained_model, dataset):
    mean_pred = np.abs(dataset.landmarks - dataset.landmarks.mean(axis=0)).sum() / (468 * dataset.count)
    assert trained_model.val_mae_ < 0.1 * mean_pred


def test_predict_near_oracle_on_training_data(trained_model, dataset):
    X, Y = dataset.motors[:200], dataset.landmarks[:200]
    assert trained_model.score_l1(X, Y) <= 2 * trained_model.train_mae_


def test_bad_training_arguments(dataset):
    with pytest.raises(ValueError):
        fit_self_model(dataset, learning_rate=0.0)
    with pytest.raises(ValueError):
        SelfModel().fit(np.zeros((0, 26)), np.zeros((0, 468, 2)))


def test_train_self_model_api(oracle):
    d = generate_dataset(oracle, 50, 1)
    model = train_self_model(d, TrainConfig(epochs=1, hidden=(4,)))
    assert model.epochs == 1 and model.hidden == (4,)


def test_config_json_round_trip():
    cfg = TrainConfig(seed=3, hidden=(64, 32), optimizer="adam")
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_json('{"bogus": 1}')


def test_sklearn_clone(small_model):
    c = clone(small_model)
    assert c.get_params() == small_model.get_params()
    assert not hasattr(c, "branches_")


def test_adam_option(dataset):
    m = fit_self_model(dataset, hidden=(8,), epochs=1, optimizer="adam", learning_rate=1e-3)
    assert np.isfinite(m.val_mae_)


# -- prediction and gradients --------------------------------------------------

def test_predict_pure_and_batched(small_model, rng):
    X = rng.uniform(size=(4, 26))
    batch = small_model.predict(X)
    assert np.array_equal(predict(small_model, X[1]), predict(small_model, X[1]))
    np.testing.assert_allclose(batch[1], predict(small_model, X[1]), rtol=0, atol=1e-15)


def test_predict_rejects_nonfinite(small_model):
    with pytest.raises(ValueError):
        predict(small_model, np.full(26, np.nan))


def test_static_rows_are_constant(small_model, oracle, rng):
    static = oracle.region_indices("static")
    a, b = small_model.predict(rng.uniform(size=26)), small_model.predict(rng.uniform(size=26))
    assert np.array_equal(a[static], b[static])
    np.testing.assert_allclose(a[static], oracle.base_landmarks[static], atol=1e-15)


@settings(max_examples=30)
@given(arrays(np.float64, 26, elements=st.floats(0, 1)), arrays(np.float64, 26, elements=st.floats(0, 1)))
def test_prediction_decoupled(small_model, oracle, p, q):
    up, lo = oracle.group_indices("upper"), oracle.group_indices("lower")
    mixed = p.copy()
    mixed[up] = q[up]
    rows = oracle.region_indices("lower")
    assert np.array_equal(small_model.predict(p)[rows], small_model.predict(mixed)[rows])
    mixed = p.copy()
    mixed[lo] = q[lo]
    rows = oracle.region_indices("upper")
    assert np.array_equal(small_model.predict(p)[rows], small_model.predict(mixed)[rows])


def test_cross_region_gradient_zero(trained_model, oracle, rng):
    up, lo = oracle.group_indices("upper"), oracle.group_indices("lower")
    for _ in range(20):
        p = rng.uniform(size=26)
        target = trained_model.predict(p)
        upper_rows = oracle.region_indices("upper")
        target[upper_rows] += rng.uniform(0.001, 0.01, size=(len(upper_rows), 2))
        g = loss_gradient_wrt_input(trained_model, p, target)
        assert np.all(g[lo] == 0.0)
        assert np.any(g[up] != 0.0)


def test_gradient_zero_at_minimum(trained_model, rng):
    p = rng.uniform(size=26)
    assert np.all(loss_gradient_wrt_input(trained_model, p, trained_model.predict(p)) == 0.0)


def gradient_fd_errors(model, rng, n_points=100, h=1e-5):
    """Relative error of the analytic input gradient against central differences."""
    errs = []
    for _ in range(n_points):
        p = rng.uniform(0.05, 0.95, size=26)
        # residuals bounded away from zero so no kink lies within h of p
        off = rng.uniform(1e-3, 1e-2, size=(468, 2)) * rng.choice([-1.0, 1.0], size=(468, 2))
        target = model.predict(p) + off
        f = model.objective(target)
        g = f(p)[1]
        fd = np.empty(26)
        for j in range(26):
            e = np.zeros(26)
            e[j] = h
            fd[j] = (f(p + e)[0] - f(p - e)[0]) / (2 * h)
        errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
    return np.array(errs)


def test_input_gradient_matches_finite_differences(trained_model, rng):
    errs = gradient_fd_errors(trained_model, rng, n_points=100)
    assert errs.max() < 1e-4


def test_save_load(small_model, tmp_path, rng):
    path = tmp_path / "m.smdl"
    small_model.save(path)
    assert path.read_bytes()[:4] == b"SMDL"
    back = SelfModel.load(path)
    for a, b in zip(back.parameters(), small_model.parameters()):
        assert np.array_equal(a, b)
    X = rng.uniform(size=(3, 26))
    assert np.array_equal(back.predict(X), small_model.predict(X))
    assert back.get_params() == small_model.get_params()


def test_jacobian_blocks(small_model, oracle, rng):
    p = rng.uniform(size=26)
    J = small_model.jacobian(p)
    h = 1e-6
    fd = np.stack([(small_model.predict(p + h * e) - small_model.predict(p - h * e)) / (2 * h)
                   for e in np.eye(26)], axis=-1)
    np.testing.assert_allclose(J, fd, atol=1e-9)
    up, lo = oracle.group_indices("upper"), oracle.group_indices("lower")
    assert np.all(J[oracle.region_indices("upper")][..., lo] == 0.0)
    assert np.all(J[oracle.region_indices("lower")][..., up] == 0.0)
    assert np.all(J[oracle.region_indices("static")] == 0.0)
