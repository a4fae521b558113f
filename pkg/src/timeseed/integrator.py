"""Adaptive Dormand-Prince 5(4) integration of the mean-field equations.

The stepper is compiled with numba and writes samples on a uniform output
grid through the pair's 4th-order continuous extension, so the step sequence
does not depend on ``dt_out``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

from .exceptions import (
    IntegrationBudgetError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .model import BlochState, NetworkParams, _as_components, _field_into

__all__ = ["IntegrationConfig", "Trajectory", "integrate", "NORM_DRIFT_BOUND"]

#: Largest tolerated change of any Bloch norm over one run.
NORM_DRIFT_BOUND = 1e-8

_OK, _BUDGET, _NONFINITE = 0, 1, 2

# Dormand & Prince (1980) tableau; FSAL, 7 stages.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array(
    [
        [0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    ]
)
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# 5th minus embedded 4th order weights, last entry acts on the FSAL stage
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension: y(t + s h) = y + h * K^T (P @ [s, s^2, s^3, s^4])
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)


@dataclass(frozen=True)
class IntegrationConfig:
    """Run length, output sampling and adaptive-step tolerances (times in 1/kappa)."""

    t_end: float = 200.0
    dt_out: float = 0.05
    rel_tol: float = 1e-9
    abs_tol: float = 1e-11
    max_steps: int = 10_000_000

    def __post_init__(self):
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise InvalidArgumentError(f"t_end must be finite and > 0, got {self.t_end!r}")
        if not (0 < self.dt_out <= self.t_end):
            raise InvalidArgumentError(f"dt_out must lie in (0, t_end], got {self.dt_out!r}")
        for name in ("rel_tol", "abs_tol"):
            tol = getattr(self, name)
            if not (0 < tol < 1):
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {tol!r}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise InvalidArgumentError(f"max_steps must be a positive integer, got {self.max_steps!r}")

    @property
    def n_samples(self) -> int:
        return int(math.floor(self.t_end / self.dt_out + 1e-9)) + 1

    def to_dict(self) -> dict:
        return {
            "t_end": self.t_end,
            "dt_out": self.dt_out,
            "rel_tol": self.rel_tol,
            "abs_tol": self.abs_tol,
            "max_steps": self.max_steps,
        }


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled mean-field solution.

    ``states`` has shape ``(len(times), n, 3)``.
    """

    times: np.ndarray
    states: np.ndarray
    params: NetworkParams
    n_steps: int = 0

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def component(self, ensemble: int, axis: str = "z") -> np.ndarray:
        return self.states[:, ensemble, "xyz".index(axis)]

    def state_at(self, i: int) -> BlochState:
        return BlochState(self.states[i], check=False)

    @property
    def final(self) -> BlochState:
        return self.state_at(-1)

    def norm_drift(self) -> np.ndarray:
        """Per-ensemble max deviation of ``|m|`` from its initial value."""
        norms = np.linalg.norm(self.states, axis=2)
        return np.max(np.abs(norms - norms[0]), axis=0)


@numba.njit(cache=True, nogil=True)
def _dopri5(y0, omega, kappa, strength, kind, t_end, dt_out, n_out, rtol, atol, max_steps,
            C, A, B, E, P):
    dim = y0.shape[0]
    out = np.empty((n_out, dim))
    K = np.empty((7, dim))
    y = y0.copy()
    tmp = np.empty(dim)
    y_new = np.empty(dim)
    out[0, :] = y
    filled = 1

    _field_into(y, omega, kappa, strength, kind, K[0])

    # initial step (Hairer, Norsett & Wanner, II.4)
    d0 = 0.0
    d1 = 0.0
    for i in range(dim):
        sc = atol + rtol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (K[0, i] / sc) ** 2
    d0 = math.sqrt(d0 / dim)
    d1 = math.sqrt(d1 / dim)
    h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(h, t_end)

    t = 0.0
    steps = 0
    status = 0
    while filled < n_out:
        if steps >= max_steps:
            status = 1
            break
        if t + h > t_end:
            h = t_end - t
        # stages 2..6
        for s in range(1, 6):
            for i in range(dim):
                acc = 0.0
                for j in range(s):
                    acc += A[s, j] * K[j, i]
                tmp[i] = y[i] + h * acc
            _field_into(tmp, omega, kappa, strength, kind, K[s])
        for i in range(dim):
            acc = 0.0
            for j in range(6):
                acc += B[j] * K[j, i]
            y_new[i] = y[i] + h * acc
        _field_into(y_new, omega, kappa, strength, kind, K[6])
        err = 0.0
        finite = True
        for i in range(dim):
            acc = 0.0
            for j in range(7):
                acc += E[j] * K[j, i]
            sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
            err += (h * acc / sc) ** 2
            if not math.isfinite(y_new[i]):
                finite = False
        steps += 1
        if not finite:
            status = 2
            break
        err = math.sqrt(err / dim)
        if err <= 1.0:
            t_next = t + h
            # samples that fall inside (t, t_next]
            while filled < n_out and filled * dt_out <= t_next * (1.0 + 1e-14):
                s = (filled * dt_out - t) / h
                s2 = s * s
                s3 = s2 * s
                s4 = s3 * s
                for i in range(dim):
                    acc = 0.0
                    for j in range(7):
                        acc += K[j, i] * (P[j, 0] * s + P[j, 1] * s2 + P[j, 2] * s3 + P[j, 3] * s4)
                    out[filled, i] = y[i] + h * acc
                filled += 1
            t = t_next
            for i in range(dim):
                y[i] = y_new[i]
                K[0, i] = K[6, i]
            factor = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** -0.2)
        else:
            factor = max(0.2, 0.9 * err ** -0.2)
        h = h * factor
        if h < 1e-14 * max(1.0, t):
            status = 2
            break
    return out, filled, status, steps


def _run(params: NetworkParams, y0: np.ndarray, cfg: IntegrationConfig) -> Trajectory:
    n_out = cfg.n_samples
    out, filled, status, steps = _dopri5(
        y0, params.omegas, params.kappas, params.strength, params.kind.code,
        float(cfg.t_end), float(cfg.dt_out), n_out, float(cfg.rel_tol), float(cfg.abs_tol),
        int(cfg.max_steps), _C, _A, _B, _E, _P,
    )
    times = np.arange(filled) * cfg.dt_out
    traj = Trajectory(times, out[:filled].reshape(filled, params.n, 3), params, int(steps))
    if status == _BUDGET:
        raise IntegrationBudgetError(
            f"step budget of {cfg.max_steps} exhausted at t = {times[-1]:.6g}", partial=traj
        )
    if status == _NONFINITE:
        raise NumericalFailureError(f"integration failed near t = {times[-1]:.6g}")
    return traj


def integrate(
    params: NetworkParams,
    initial=None,
    cfg: IntegrationConfig | None = None,
    enforce_norm: bool = True,
) -> Trajectory:
    """Integrate the mean-field equations from ``initial``.

    Parameters
    ----------
    params : NetworkParams
    initial : BlochState or array_like of shape (n, 3), optional
        Defaults to every ensemble fully polarized along +z.
    cfg : IntegrationConfig, optional
    enforce_norm : bool
        If a Bloch norm drifts by more than :data:`NORM_DRIFT_BOUND`, rerun
        with tolerances tightened in proportion to the excess (at most three
        times, never below ``1e-14``).

    Returns
    -------
    Trajectory
        Samples at ``0, dt_out, 2 dt_out, ...`` up to ``t_end``.

    Raises
    ------
    IntegrationBudgetError
        ``cfg.max_steps`` accepted+rejected steps were used up; the partial
        trajectory is attached.
    NumericalFailureError
        The state became non-finite or the step size collapsed.
    """
    cfg = cfg or IntegrationConfig()
    if initial is None:
        initial = BlochState.polarized(params.n)
    elif not isinstance(initial, BlochState):
        initial = BlochState(initial)
    y0 = np.ascontiguousarray(_as_components(params, initial).reshape(-1), dtype=float)

    traj = _run(params, y0, cfg)
    for _ in range(3):
        drift = float(traj.norm_drift().max())
        if not enforce_norm or drift <= NORM_DRIFT_BOUND or cfg.rel_tol <= 1e-14:
            break
        # drift grows roughly linearly with the tolerance
        shrink = min(0.1, 0.25 * NORM_DRIFT_BOUND / drift)
        cfg = replace(
            cfg,
            rel_tol=max(cfg.rel_tol * shrink, 1e-14),
            abs_tol=max(cfg.abs_tol * shrink, 1e-16),
        )
        traj = _run(params, y0, cfg)
    return traj
