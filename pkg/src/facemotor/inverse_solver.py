"""Retargeting: find motor commands whose predicted landmarks match a target.

Projected gradient descent on the L1 landmark loss through a frozen self
model. The search direction is the gradient plus heavy-ball momentum; each
iteration tries ``clip(p - step * direction, 0, 1)`` and halves the step (up
to 20 times) until the loss does not increase, so loss traces are monotone
and every iterate is feasible. If no step is accepted the momentum is dropped
and the plain gradient is tried once more before stopping.

The trial step of an iteration is ``min(step_size, 2 * last accepted step)``.
Plain subgradient steps jam near the kinks of the L1 objective; momentum and
the step memory are what make it reach ~1e-5 losses in a few hundred
iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import landmarks as lm
from .blendshape_rig import BlendshapeRig, rig_landmarks
from .motor_protocol import check_motor_vector, default_table
from .self_model import SelfModel

log = logging.getLogger(__name__)

INIT_MODES = ("neutral_start", "warm_start_previous", "explicit")
MAX_HALVINGS = 20


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 500
    step_size: float = 50.0
    convergence_tol: float = 1e-7
    init_mode: str = "warm_start_previous"
    momentum: float = 0.9
    stall_window: int = 10

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.stall_window < 1:
            raise ValueError("stall_window must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")


@dataclass
class SolveReport:
    final_motor: np.ndarray
    final_loss: float
    iterations_used: int
    loss_trace: list = field(default_factory=list)
    converged: bool = False
    gradient_norm: float = 0.0


def retarget_frame(model: SelfModel, target, options: SolverOptions | None = None,
                   init=None, callback=None) -> SolveReport:
    """Solve one frame.

    Converged means the loss hit zero, the gradient vanished, no
    non-increasing step exists, or the loss fell by less than
    ``convergence_tol`` over the last ``stall_window`` iterations.
    ``callback(iteration, motor, loss)`` sees every accepted iterate,
    including the start point as iteration 0.
    """
    options = options or SolverOptions()
    target = lm.check_landmarks(target, "target")
    p = default_table().neutral_vector() if init is None else check_motor_vector(init)
    f = model.objective(target)

    loss, grad = f(p)
    if not np.isfinite(loss):
        raise SolverError("non-finite loss at initialization")
    trace = [loss]
    if callback is not None:
        callback(0, p.copy(), loss)
    converged = loss == 0.0 or not np.any(grad)
    velocity = np.zeros_like(p)
    step = options.step_size
    it = 0
    while not converged and it < options.max_iterations:
        direction = options.momentum * velocity + grad
        trial = min(options.step_size, 2.0 * step)
        for _ in range(MAX_HALVINGS + 1):
            cand = np.clip(p - trial * direction, 0.0, 1.0)
            cand_loss, cand_grad = f(cand)
            if not np.isfinite(cand_loss):
                raise SolverError(f"loss diverged at iteration {it + 1} (step {trial:g})")
            if cand_loss <= loss:
                break
            trial *= 0.5
        else:
            if np.any(velocity):
                velocity = np.zeros_like(p)
                continue
            converged = True
            break
        it += 1
        velocity, step = direction, trial
        p, loss, grad = cand, cand_loss, cand_grad
        trace.append(loss)
        if callback is not None:
            callback(it, p.copy(), loss)
        w = options.stall_window
        if loss == 0.0 or (len(trace) > w and trace[-1 - w] - loss < options.convergence_tol):
            converged = True

    return SolveReport(final_motor=p, final_loss=loss, iterations_used=it, loss_trace=trace,
                       converged=converged, gradient_norm=float(np.linalg.norm(grad)))


def retarget_sequence(model: SelfModel, targets, options: SolverOptions | None = None,
                      init=None) -> list[SolveReport]:
    """Solve frames in order; by default each frame starts from the previous answer.

    ``init`` seeds frame 0 (and every frame under ``explicit``); otherwise
    the neutral pose is used.
    """
    options = options or SolverOptions()
    targets = list(targets)
    if not targets:
        raise ValueError("empty target sequence")
    neutral = default_table().neutral_vector()
    first = neutral if init is None else check_motor_vector(init)
    reports = []
    for t, target in enumerate(targets):
        if options.init_mode == "warm_start_previous" and reports:
            start = reports[-1].final_motor
        elif options.init_mode == "neutral_start":
            start = neutral
        else:
            start = first
        try:
            reports.append(retarget_frame(model, target, options, start))
        except (ValueError, SolverError) as exc:
            raise type(exc)(f"frame {t}: {exc}") from exc
        log.debug("frame %d: loss %.3e after %d iterations", t, reports[-1].final_loss,
                  reports[-1].iterations_used)
    return reports


def blendshape_to_motor(model: SelfModel, rig: BlendshapeRig, coeffs_seq,
                        options: SolverOptions | None = None, return_reports=False):
    targets = [rig_landmarks(rig, c) for c in coeffs_seq]
    reports = retarget_sequence(model, targets, options)
    for t, r in enumerate(reports):
        log.info("frame %d: landmark loss %.3e", t, r.final_loss)
    motors = [r.final_motor for r in reports]
    return (motors, reports) if return_reports else motors


class InverseRetargeter(TransformerMixin, BaseEstimator):
    """Transformer wrapper: target landmarks ``(n, 468, 2)`` -> motors ``(n, 26)``.

    Rows are treated as an ordered sequence, so warm starting carries over
    from one row to the next.
    """

    def __init__(self, model=None, max_iterations=500, step_size=50.0,
                 convergence_tol=1e-7, init_mode="warm_start_previous", momentum=0.9):
        self.model = model
        self.max_iterations = max_iterations
        self.step_size = step_size
        self.convergence_tol = convergence_tol
        self.init_mode = init_mode
        self.momentum = momentum

    def _options(self):
        return SolverOptions(self.max_iterations, self.step_size, self.convergence_tol,
                             self.init_mode, self.momentum)

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("InverseRetargeter needs a fitted SelfModel")
        self._options()
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, lm.N_LANDMARKS, 2)
        self.reports_ = retarget_sequence(self.model, X, self._options())
        return np.stack([r.final_motor for r in self.reports_])


def with_options(options: SolverOptions, **changes) -> SolverOptions:
    return replace(options, **changes)
