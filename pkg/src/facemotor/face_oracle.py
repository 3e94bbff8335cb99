"""Deterministic simulated face: motor commands -> 468 2D landmarks.

For landmark ``i`` the pre-squash displacement is::

    d_i = sum_m influence[i, m] * p[m] + sum_k coupling_gain[k, i] * p[a_k] * p[b_k]

and the observed point is ``base_i + radius * tanh(d_i / radius)`` per
coordinate. Influence and coupling are zero across the upper/lower split, so
upper landmarks never react to lower-group motors and vice versa. Static
landmarks never move.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import landmarks as lm
from ._io import FormatError, Reader, Writer, digest, rng_for
from .motor_protocol import N_EXPRESSION, check_motor_vector, default_table

MAGIC = b"FORC"
VERSION = 1


class OracleConfigError(ValueError):
    pass


def _default_groups():
    table = default_table()
    ids = table.expression_ids
    labels = table.group_labels()
    upper = [i for i, g in zip(ids, labels) if g == "upper"]
    lower = [i for i, g in zip(ids, labels) if g == "lower"]
    return upper, lower


@dataclass
class OracleConfig:
    """Structural knobs of the simulated face.

    ``upper_motors``/``lower_motors`` are motor ids from the control table;
    together they must cover the 26 expression motors exactly once.
    ``region_labels`` optionally overrides the template's per-landmark
    upper/lower/static partition.
    """

    upper_motors: list = field(default_factory=lambda: _default_groups()[0])
    lower_motors: list = field(default_factory=lambda: _default_groups()[1])
    region_labels: list | None = None
    radius: float = 0.04
    drive: float = 1.5
    squash: bool = True
    coupling_density: float = 0.2
    coupling_share: float = 0.3
    influence_width: float = 0.12

    def validate(self):
        expr = default_table().expression_ids
        up, lo = set(self.upper_motors), set(self.lower_motors)
        both = sorted(up & lo)
        if both:
            raise OracleConfigError(f"ambiguous motor group for motor(s) {both}")
        unknown = sorted((up | lo) - set(expr))
        if unknown:
            raise OracleConfigError(f"motor(s) {unknown} are not expression motors")
        missing = sorted(set(expr) - up - lo)
        if missing:
            raise OracleConfigError(f"motor(s) {missing} belong to no group")
        if len(self.upper_motors) != len(up) or len(self.lower_motors) != len(lo):
            raise OracleConfigError("duplicate motor id in a group")
        if self.region_labels is not None:
            labels = list(self.region_labels)
            if len(labels) != lm.N_LANDMARKS or not set(labels) <= set(lm.REGIONS):
                raise OracleConfigError("region_labels must hold 468 of upper/lower/static")
        if not self.radius > 0 or not 0 < self.radius < 0.5:
            raise OracleConfigError("radius must lie in (0, 0.5)")
        if not self.drive > 0:
            raise OracleConfigError("drive must be positive")
        if not 0 <= self.coupling_density <= 1:
            raise OracleConfigError("coupling_density must lie in [0, 1]")
        if not 0 <= self.coupling_share < 1:
            raise OracleConfigError("coupling_share must lie in [0, 1)")
        if not self.influence_width > 0:
            raise OracleConfigError("influence_width must be positive")
        return self

    @classmethod
    def linear(cls, **kw):
        """Coupling and squash disabled: the map is affine in the motors."""
        return cls(squash=False, coupling_density=0.0, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "OracleConfig":
        raw = json.loads(text)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise OracleConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw).validate()


@dataclass(frozen=True, eq=False, repr=False)
class FaceOracle(TransformerMixin, BaseEstimator):
    seed: int
    base_landmarks: np.ndarray       # (468, 2)
    influence: np.ndarray            # (468, 26, 2)
    coupling_pairs: np.ndarray       # (K, 2) indices into the motor vector
    coupling_gain: np.ndarray        # (K, 468, 2)
    radius: float
    squash: bool
    region_mask: np.ndarray          # (468,) codes into landmarks.REGIONS
    motor_groups: np.ndarray         # (26,) 0 = upper, 1 = lower

    def __post_init__(self):
        for name in ("base_landmarks", "influence", "coupling_pairs", "coupling_gain",
                     "region_mask", "motor_groups"):
            getattr(self, name).setflags(write=False)

    def __repr__(self):
        kind = "tanh" if self.squash else "linear"
        return (f"FaceOracle(seed={self.seed}, {kind}, radius={self.radius}, "
                f"pairs={len(self.coupling_pairs)})")

    # sklearn-style batch interface
    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([simulate_landmarks(self, x) for x in X])

    @property
    def n_motors(self) -> int:
        return self.influence.shape[1]

    def neutral(self) -> np.ndarray:
        return self.base_landmarks.copy()

    def region_indices(self, region: str) -> np.ndarray:
        return np.flatnonzero(self.region_mask == lm.REGION_CODE[region])

    def group_indices(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.motor_groups == ("upper", "lower").index(group))

    def displacement(self, motor: np.ndarray) -> np.ndarray:
        """Pre-squash displacement, shape (468, 2)."""
        d = np.einsum("imc,m->ic", self.influence, motor)
        if len(self.coupling_pairs):
            prod = motor[self.coupling_pairs[:, 0]] * motor[self.coupling_pairs[:, 1]]
            d = d + np.einsum("kic,k->ic", self.coupling_gain, prod)
        return d

    def offset(self, motor) -> np.ndarray:
        """Landmark motion away from the base pose (post-squash), shape (468, 2)."""
        d = self.displacement(check_motor_vector(motor, self.n_motors))
        return self.radius * np.tanh(d / self.radius) if self.squash else d

    def jacobian(self, motor) -> np.ndarray:
        """d landmarks / d motor, shape (468, 2, 26)."""
        p = check_motor_vector(motor, self.n_motors)
        d = self.displacement(p)
        dd = np.transpose(self.influence, (0, 2, 1)).copy()  # (468, 2, 26)
        for k, (a, b) in enumerate(self.coupling_pairs):
            dd[:, :, a] += self.coupling_gain[k] * p[b]
            dd[:, :, b] += self.coupling_gain[k] * p[a]
        if self.squash:
            dd *= (1.0 - np.tanh(d / self.radius) ** 2)[:, :, None]
        return dd

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        w.u64(self.seed)
        n, m, _ = self.influence.shape
        k = len(self.coupling_pairs)
        w.u32(n)
        w.u32(m)
        w.u32(k)
        w.f64(self.radius)
        w.u8(int(self.squash))
        w.ints(self.region_mask, "<u1")
        w.ints(self.motor_groups, "<u1")
        w.floats(self.base_landmarks)
        w.floats(self.influence)
        w.ints(self.coupling_pairs, "<u4")
        w.floats(self.coupling_gain)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FaceOracle":
        r = Reader(data, MAGIC, (VERSION,))
        seed = r.u64()
        n, m, k = r.u32(), r.u32(), r.u32()
        if n != lm.N_LANDMARKS or m != N_EXPRESSION:
            raise FormatError(f"unexpected oracle dimensions {n}x{m}")
        radius = r.f64()
        squash = bool(r.u8())
        region_mask = r.ints((n,), "<u1")
        motor_groups = r.ints((m,), "<u1")
        base = r.floats((n, 2))
        influence = r.floats((n, m, 2))
        pairs = r.ints((k, 2), "<u4")
        gain = r.floats((k, n, 2))
        r.done()
        return cls(seed, base, influence, pairs, gain, radius, squash, region_mask, motor_groups)

    def fingerprint(self) -> bytes:
        return digest(self.to_bytes())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FaceOracle":
        return cls.from_bytes(Path(path).read_bytes())


def build_oracle(seed: int, config: OracleConfig | None = None) -> FaceOracle:
    config = (config or OracleConfig()).validate()
    if seed < 0:
        raise OracleConfigError("seed must be non-negative")
    rng = rng_for(seed, 0)
    table = default_table()
    ids = table.expression_ids
    upper = set(config.upper_motors)
    groups = np.array([0 if mid in upper else 1 for mid in ids], dtype=np.int64)

    if config.region_labels is None:
        regions = lm.TEMPLATE_REGIONS.copy()
    else:
        regions = np.array([lm.REGION_CODE[r] for r in config.region_labels], dtype=np.int64)
    base = np.array(lm.TEMPLATE, dtype=float)
    n = lm.N_LANDMARKS
    m = len(ids)

    # each motor pulls a smooth patch of its own region along a slowly
    # rotating direction field
    influence = np.zeros((n, m, 2))
    w2 = 2.0 * config.influence_width ** 2
    for j in range(m):
        rows = np.flatnonzero(regions == groups[j])
        if rows.size == 0:
            continue
        center = base[rng.choice(rows)]
        theta = rng.uniform(0, 2 * np.pi)
        twist = rng.normal(0, 3.0, size=2)
        amp = rng.uniform(0.5, 1.0)
        pts = base[rows]
        falloff = np.exp(-np.sum((pts - center) ** 2, axis=1) / w2)
        ang = theta + (pts - center) @ twist
        influence[rows, j, 0] = amp * falloff * np.cos(ang)
        influence[rows, j, 1] = amp * falloff * np.sin(ang)

    pairs = []
    for g in (0, 1):
        members = np.flatnonzero(groups == g)
        for a_i, a in enumerate(members):
            for b in members[a_i + 1:]:
                if rng.uniform() < config.coupling_density:
                    pairs.append((a, b))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    gain = np.zeros((len(pairs), n, 2))
    for k, (a, b) in enumerate(pairs):
        rows = np.flatnonzero(regions == groups[a])
        field_dir = rng.normal(size=2)
        center = 0.5 * (base[rng.choice(rows)] + base[rng.choice(rows)])
        falloff = np.exp(-np.sum((base[rows] - center) ** 2, axis=1) / w2)
        gain[k, rows, :] = falloff[:, None] * field_dir[None, :]

    # scale so the worst-case pre-squash displacement per coordinate is
    # drive * radius (or radius when unsquashed, keeping outputs in range)
    lin_bound = np.abs(influence).sum(axis=1)
    coup_bound = np.abs(gain).sum(axis=0) if len(pairs) else np.zeros((n, 2))
    lin_max, coup_max = lin_bound.max(), coup_bound.max() if len(pairs) else 0.0
    target = config.radius * (config.drive if config.squash else 1.0)
    if len(pairs) and coup_max > 0:
        share = config.coupling_share
        influence *= (1 - share) * target / lin_max
        gain *= share * target / coup_max
    else:
        influence *= target / lin_max
    total = np.abs(influence).sum(axis=1) + (np.abs(gain).sum(axis=0) if len(pairs) else 0)
    assert total.max() <= target * (1 + 1e-12)

    return FaceOracle(
        seed=int(seed),
        base_landmarks=base,
        influence=influence,
        coupling_pairs=pairs,
        coupling_gain=gain,
        radius=float(config.radius),
        squash=bool(config.squash),
        region_mask=regions,
        motor_groups=groups,
    )


def simulate_landmarks(oracle: FaceOracle, motor) -> np.ndarray:
    return oracle.base_landmarks + oracle.offset(motor)


def load_config(path) -> OracleConfig:
    return OracleConfig.from_json(Path(path).read_text())
