"""Self-model of the face: motor commands -> landmarks, learned from samples.

Two independent tanh MLPs: the upper branch sees only upper-group motors and
predicts upper-region landmarks, the lower branch likewise. Static landmarks
are emitted as their training mean. All gradients are derived by hand.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import landmarks as lm
from ._io import FormatError, Reader, Writer, rng_for
from .face_oracle import FaceOracle, simulate_landmarks
from .motor_protocol import N_EXPRESSION, check_motor_vector, clamp_to_limits, default_table

BRANCHES = ("upper", "lower")
DATASET_MAGIC = b"FDST"
MODEL_MAGIC = b"SMDL"


# -- dataset -----------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    motors: np.ndarray          # (n, 26)
    landmarks: np.ndarray       # (n, 468, 2)
    seed: int
    oracle_hash: bytes
    region_mask: np.ndarray     # (468,)
    motor_groups: np.ndarray    # (26,)

    @property
    def count(self) -> int:
        return len(self.motors)

    def __len__(self):
        return self.count

    def __iter__(self):
        return iter(zip(self.motors, self.landmarks))

    def to_bytes(self) -> bytes:
        w = Writer(DATASET_MAGIC)
        if len(self.oracle_hash) != 16:
            raise ValueError("oracle hash must be 16 bytes")
        w._parts.append(self.oracle_hash)
        w.u64(self.count)
        w.u64(self.seed)
        w.u32(self.motors.shape[1])
        w.u32(self.landmarks.shape[1])
        w.ints(self.region_mask, "<u1")
        w.ints(self.motor_groups, "<u1")
        w.floats(self.motors)
        w.floats(self.landmarks)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        r = Reader(data, DATASET_MAGIC)
        oracle_hash = r._take(16)
        count, seed = r.u64(), r.u64()
        m, n = r.u32(), r.u32()
        region_mask = r.ints((n,), "<u1")
        motor_groups = r.ints((m,), "<u1")
        motors = r.floats((count, m))
        landmarks = r.floats((count, n, 2))
        r.done()
        return cls(motors, landmarks, seed, oracle_hash, region_mask, motor_groups)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


def _sample_motor(seed: int, index: int) -> np.ndarray:
    return rng_for(seed, 1, index).uniform(0.0, 1.0, size=N_EXPRESSION)


def generate_dataset(oracle: FaceOracle, count: int, seed: int) -> Dataset:
    """Random-command dataset; sample ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    motors = np.stack([clamp_to_limits(_sample_motor(seed, i)) for i in range(count)])
    landmarks = np.stack([simulate_landmarks(oracle, p) for p in motors])
    return Dataset(motors, landmarks, int(seed), oracle.fingerprint(),
                   np.array(oracle.region_mask), np.array(oracle.motor_groups))


# -- loss --------------------------------------------------------------------

def l1_landmark_loss(c_r, c_v) -> float:
    """Mean over points of the per-point L1 distance."""
    a = lm.check_landmarks(c_r, "C_r")
    b = lm.check_landmarks(c_v, "C_v")
    return float(np.abs(a - b).sum() / lm.N_LANDMARKS)


# -- network pieces ------------------------------------------------------------

def _init_layers(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append([W, b])
    return layers


def _forward(layers, X):
    """Return output and the per-layer inputs needed for backprop."""
    acts = [X]
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if k < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def _backward(layers, acts, g_out, need_input=False, need_params=True):
    grads = [None] * len(layers)
    g = g_out
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k < len(layers) - 1:
            g = g * (1.0 - acts[k + 1] ** 2)
        if need_params:
            grads[k] = [acts[k].T @ g, g.sum(axis=0)]
        if k > 0 or need_input:
            g = g @ W.T
    return grads, (g if need_input else None)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 60
    learning_rate: float = 30.0
    batch_size: int = 64
    hidden: tuple = (128, 128)
    momentum: float = 0.9
    optimizer: str = "sgd"
    validation_fraction: float = 0.1

    def to_json(self) -> str:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if "hidden" in raw:
            raw["hidden"] = tuple(raw["hidden"])
        return cls(**raw)


class SelfModel(RegressorMixin, BaseEstimator):
    """Decoupled MLP surrogate of the face.

    ``fit(X, y)`` takes motors ``(n, 26)`` and landmarks ``(n, 468, 2)``;
    ``predict`` returns landmarks of the same layout. The loss is the L1
    landmark loss, optimised with mini-batch SGD with momentum (or Adam).

    The loss is averaged over all 468 points and the output layer is scaled
    by the per-coordinate target spread, so raw gradients are tiny; that is
    why the default SGD step is large.
    """

    def __init__(self, hidden=(128, 128), learning_rate=30.0, epochs=60, batch_size=64,
                 momentum=0.9, optimizer="sgd", validation_fraction=0.1, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.optimizer = optimizer
        self.validation_fraction = validation_fraction
        self.seed = seed

    @classmethod
    def from_config(cls, config: TrainConfig) -> "SelfModel":
        return cls(hidden=tuple(config.hidden), learning_rate=config.learning_rate,
                   epochs=config.epochs, batch_size=config.batch_size,
                   momentum=config.momentum, optimizer=config.optimizer,
                   validation_fraction=config.validation_fraction, seed=config.seed)

    # -- fitting -------------------------------------------------------------

    def _check_params(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")

    def fit(self, X, y, region_mask=None, motor_groups=None):
        self._check_params()
        X = np.asarray(X, dtype=float)
        Y = np.asarray(y, dtype=float).reshape(len(X), lm.N_LANDMARKS, 2)
        if len(X) == 0:
            raise ValueError("empty dataset")
        if X.ndim != 2 or X.shape[1] != N_EXPRESSION:
            raise ValueError(f"X must have shape (n, {N_EXPRESSION})")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("non-finite training data")
        if region_mask is None:
            region_mask = lm.TEMPLATE_REGIONS
        if motor_groups is None:
            motor_groups = np.array([BRANCHES.index(g) for g in default_table().group_labels()])
        self.region_mask_ = np.asarray(region_mask, dtype=np.int64)
        self.motor_groups_ = np.asarray(motor_groups, dtype=np.int64)

        n = len(X)
        order = rng_for(self.seed, 3).permutation(n)
        n_val = int(round(self.validation_fraction * n)) if n > 1 else 0
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        Xt, Yt = X[train_idx], Y[train_idx]

        self.static_ = Yt.mean(axis=0)
        self.branches_ = {}
        for b, name in enumerate(BRANCHES):
            cols = np.flatnonzero(self.motor_groups_ == b)
            rows = np.flatnonzero(self.region_mask_ == lm.REGION_CODE[name])
            targets = Yt[:, rows, :].reshape(len(Xt), -1)
            mean = targets.mean(axis=0)
            scale = targets.std(axis=0)
            scale = np.where(scale > 1e-12, scale, 1.0)
            sizes = [len(cols), *self.hidden, targets.shape[1]]
            layers = _init_layers(rng_for(self.seed, 1, b), sizes) if len(cols) and len(rows) else []
            self.branches_[name] = {"cols": cols, "rows": rows, "mean": mean,
                                    "scale": scale, "layers": layers}

        self._opt_state = {}
        self.history_ = []
        self.val_mae_history_ = []
        for epoch in range(self.epochs):
            self._run_epoch(Xt, Yt, epoch)
            self.history_.append(self.score_l1(Xt, Yt))
            if n_val:
                self.val_mae_history_.append(self.score_l1(X[val_idx], Y[val_idx]))
        self.n_train_ = len(train_idx)
        self.train_mae_ = self.score_l1(Xt, Yt)
        self.val_mae_ = self.score_l1(X[val_idx], Y[val_idx]) if n_val else float("nan")
        return self

    def _run_epoch(self, X, Y, epoch):
        perm = rng_for(self.seed, 2, epoch).permutation(len(X))
        for start in range(0, len(X), self.batch_size):
            idx = perm[start:start + self.batch_size]
            for name, br in self.branches_.items():
                if not br["layers"]:
                    continue
                xb = self._scale_input(X[idx][:, br["cols"]])
                yb = Y[idx][:, br["rows"], :].reshape(len(idx), -1)
                out, acts = _forward(br["layers"], xb)
                resid = br["mean"] + br["scale"] * out - yb
                # d/dout of mean-over-batch L1 landmark loss restricted to this region
                g_out = np.sign(resid) * br["scale"] / (lm.N_LANDMARKS * len(idx))
                grads, _ = _backward(br["layers"], acts, g_out)
                self._step(name, br["layers"], grads)

    def _step(self, name, layers, grads):
        state = self._opt_state.setdefault(name, {"t": 0, "m": None, "v": None})
        state["t"] += 1
        flat_p = [p for layer in layers for p in layer]
        flat_g = [g for layer in grads for g in layer]
        if state["m"] is None:
            state["m"] = [np.zeros_like(p) for p in flat_p]
            state["v"] = [np.zeros_like(p) for p in flat_p]
        lr = self.learning_rate
        if self.optimizer == "sgd":
            for p, g, m in zip(flat_p, flat_g, state["m"]):
                m *= self.momentum
                m += g
                p -= lr * m
        else:
            b1, b2, eps, t = 0.9, 0.999, 1e-12, state["t"]
            c1, c2 = 1 - b1 ** t, 1 - b2 ** t
            for p, g, m, v in zip(flat_p, flat_g, state["m"], state["v"]):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    @staticmethod
    def _scale_input(x):
        return 2.0 * x - 1.0

    # -- inference -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "branches_"):
            raise NotFittedError("SelfModel is not fitted")

    def predict(self, X):
        self._check_fitted()
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != N_EXPRESSION or not np.all(np.isfinite(X)):
            raise ValueError("motor inputs must be finite with 26 components")
        out = np.repeat(self.static_[None], len(X), axis=0)
        for br in self.branches_.values():
            if not br["layers"]:
                continue
            y, _ = _forward(br["layers"], self._scale_input(X[:, br["cols"]]))
            out[:, br["rows"], :] = (br["mean"] + br["scale"] * y).reshape(len(X), -1, 2)
        return out[0] if single else out

    def score_l1(self, X, Y) -> float:
        """Mean L1 landmark loss over samples."""
        if len(X) == 0:
            return float("nan")
        P = self.predict(X)
        return float(np.abs(P - np.asarray(Y).reshape(P.shape)).sum() / (lm.N_LANDMARKS * len(X)))

    def score(self, X, y, sample_weight=None):
        return -self.score_l1(X, y)

    def loss_and_gradient(self, motor, target):
        """L1 landmark loss of predict(motor) vs target and its gradient in motor.

        Residuals that are exactly zero contribute a zero subgradient.
        """
        p = np.asarray(motor, dtype=float)
        if p.shape != (N_EXPRESSION,) or not np.all(np.isfinite(p)):
            raise ValueError("motor must be 26 finite values")
        return self.objective(target)(p)

    def jacobian(self, motor) -> np.ndarray:
        """d predict / d motor with shape (468, 2, 26)."""
        self._check_fitted()
        p = np.asarray(motor, dtype=float)
        if p.shape != (N_EXPRESSION,) or not np.all(np.isfinite(p)):
            raise ValueError("motor must be 26 finite values")
        J = np.zeros((lm.N_LANDMARKS, 2, N_EXPRESSION))
        for br in self.branches_.values():
            if not br["layers"]:
                continue
            cols, rows = br["cols"], br["rows"]
            _, acts = _forward(br["layers"], self._scale_input(p[cols])[None])
            n_out = 2 * len(rows)
            _, g_in = _backward(br["layers"], acts, np.diag(br["scale"] * np.ones(n_out)),
                                need_input=True, need_params=False)
            J[np.ix_(rows, [0, 1], cols)] = 2.0 * g_in.reshape(len(rows), 2, len(cols))
        return J

    def objective(self, target):
        """Return ``f(p) -> (loss, grad)`` for a fixed target.

        Target-dependent work is done once here, which matters inside the
        retargeting loop.
        """
        self._check_fitted()
        t = lm.check_landmarks(target, "target")
        static_rows = self.region_mask_ == lm.REGION_CODE["static"]
        const = float(np.abs(self.static_ - t)[static_rows].sum())
        active = []
        for br in self.branches_.values():
            rows = br["rows"]
            if br["layers"]:
                active.append((br["cols"], br["layers"], br["mean"], t[rows].ravel(),
                               br["scale"], br["scale"] / lm.N_LANDMARKS))
            else:
                const += float(np.abs(self.static_[rows] - t[rows]).sum())

        def f(p):
            loss = const
            grad = np.zeros(N_EXPRESSION)
            for cols, layers, mean, trow, scale, gscale in active:
                y, acts = _forward(layers, (2.0 * p[cols] - 1.0)[None])
                # same operation order as predict, so an exact fit gives exact zeros
                resid = (mean + scale * y[0]) - trow
                loss += float(np.abs(resid).sum())
                _, g_in = _backward(layers, acts, (np.sign(resid) * gscale)[None],
                                   need_input=True, need_params=False)
                grad[cols] = 2.0 * g_in[0]
            return loss / lm.N_LANDMARKS, grad

        return f

    # -- persistence ---------------------------------------------------------

    def parameters(self) -> list:
        """Flat list of parameter arrays in a fixed order (upper then lower)."""
        self._check_fitted()
        return [p for name in BRANCHES for layer in self.branches_[name]["layers"] for p in layer]

    def to_bytes(self) -> bytes:
        self._check_fitted()
        w = Writer(MODEL_MAGIC)
        w.text(json.dumps(self.get_params() | {"hidden": list(self.hidden)}))
        w.ints(self.region_mask_, "<u1")
        w.ints(self.motor_groups_, "<u1")
        w.floats(self.static_)
        w.f64(getattr(self, "val_mae_", float("nan")))
        w.f64(getattr(self, "train_mae_", float("nan")))
        for name in BRANCHES:
            br = self.branches_[name]
            w.array(br["mean"])
            w.array(br["scale"])
            w.u32(len(br["layers"]))
            for W, b in br["layers"]:
                w.array(W)
                w.array(b)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SelfModel":
        r = Reader(data, MODEL_MAGIC)
        params = json.loads(r.text())
        params["hidden"] = tuple(params["hidden"])
        model = cls(**params)
        model.region_mask_ = r.ints((lm.N_LANDMARKS,), "<u1")
        model.motor_groups_ = r.ints((N_EXPRESSION,), "<u1")
        model.static_ = r.floats((lm.N_LANDMARKS, 2))
        model.val_mae_ = r.f64()
        model.train_mae_ = r.f64()
        model.branches_ = {}
        for b, name in enumerate(BRANCHES):
            mean, scale = r.array(), r.array()
            layers = [[r.array(), r.array()] for _ in range(r.u32())]
            model.branches_[name] = {
                "cols": np.flatnonzero(model.motor_groups_ == b),
                "rows": np.flatnonzero(model.region_mask_ == lm.REGION_CODE[name]),
                "mean": mean, "scale": scale, "layers": layers,
            }
        r.done()
        for br in model.branches_.values():
            if br["layers"] and br["layers"][-1][0].shape[1] != 2 * len(br["rows"]):
                raise FormatError("layer shapes do not match region sizes")
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SelfModel":
        return cls.from_bytes(Path(path).read_bytes())


def train_self_model(dataset: Dataset, config: TrainConfig | None = None) -> SelfModel:
    if dataset.count == 0:
        raise ValueError("empty dataset")
    model = SelfModel.from_config(config or TrainConfig())
    return model.fit(dataset.motors, dataset.landmarks,
                     region_mask=dataset.region_mask, motor_groups=dataset.motor_groups)


def predict(model: SelfModel, motor) -> np.ndarray:
    return model.predict(check_motor_vector(motor))


def loss_gradient_wrt_input(model: SelfModel, motor, target) -> np.ndarray:
    return model.loss_and_gradient(motor, target)[1]
