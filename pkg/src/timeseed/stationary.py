"""Fixed points, linear stability and critical couplings.

Closed forms exist only for two dissipatively coupled ensembles with a common
``kappa``.  Everything else goes through :func:`critical_coupling_search`,
which bisects the coupling strength against a long mean-field run.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .analysis import AMP_THRESHOLD, late_amplitude
from .exceptions import (
    InvalidArgumentError,
    InvalidBracketError,
    NumericalFailureError,
    OutOfDomainError,
    UnsupportedConfigurationError,
)
from .integrator import IntegrationConfig, integrate
from .model import BLOCH_NORM_EPS, BlochState, CouplingKind, NetworkParams, _as_components, vector_field

__all__ = [
    "FixedPoint",
    "StabilityClass",
    "StabilityReport",
    "critical_coupling_search",
    "fixed_point_two",
    "gamma_crit",
    "jacobian",
    "oscillations_persist",
    "stability_at",
]

#: Oracle run used by the bisection; the last quarter is inspected.
ORACLE_CONFIG = IntegrationConfig(t_end=2000.0, dt_out=0.05, rel_tol=1e-10, abs_tol=1e-12)
ORACLE_WINDOW = 0.25
FD_STEP = 1e-6


@dataclass(frozen=True)
class FixedPoint:
    state: BlochState
    physical: bool


class StabilityClass(str, enum.Enum):
    HYPERBOLIC = "hyperbolic"
    MARGINAL = "marginal"
    OSCILLATORY = "oscillatory"


@dataclass(frozen=True)
class StabilityReport:
    jacobian_eigenvalues: np.ndarray
    classification: StabilityClass

    @property
    def max_real(self) -> float:
        return float(self.jacobian_eigenvalues.real.max())


def _require_two_dissipative(params: NetworkParams) -> None:
    if params.n != 2 or params.kind is not CouplingKind.DISSIPATIVE:
        raise UnsupportedConfigurationError(
            "closed form needs exactly two dissipatively coupled ensembles "
            f"(got n = {params.n}, coupling = {params.kind.value})"
        )
    ka, kb = params.kappas
    if not np.isclose(ka, kb, rtol=1e-12, atol=0.0):
        raise UnsupportedConfigurationError(f"closed form needs a common kappa, got {ka} and {kb}")


def fixed_point_two(params: NetworkParams, on_sphere: bool = False) -> FixedPoint:
    """Stationary point of two dissipatively coupled ensembles.

    Returns ``(0, my_A, 0, 0, my_B, 0)`` with
    ``my_A = [(Gamma/2)(Omega_A - Omega_B) + kappa Omega_A] / [kappa (Gamma + kappa)]``
    and ``my_B`` obtained by swapping A and B.  The point is physical when both
    ``|my| <= 1``.

    With ``on_sphere=True`` a physical point is lifted to the unit sphere,
    ``mz = -sqrt(1 - my^2)``; this is the attractor reached from fully
    polarized initial states, and it shares ``mx`` and ``my`` with the
    equatorial point.

    ``|my| <= 1`` is tested with the slack :data:`~timeseed.model.BLOCH_NORM_EPS`
    so that the point computed at exactly :func:`gamma_crit` counts as physical.
    """
    _require_two_dissipative(params)
    (wa, wb), kappa, gamma = params.omegas, params.kappas[0], params.strength
    denom = kappa * (gamma + kappa)
    my_a = (0.5 * gamma * (wa - wb) + kappa * wa) / denom
    my_b = (0.5 * gamma * (wb - wa) + kappa * wb) / denom
    physical = bool(max(abs(my_a), abs(my_b)) <= 1.0 + BLOCH_NORM_EPS)
    mz_a = mz_b = 0.0
    if on_sphere and physical:
        mz_a = -np.sqrt(max(0.0, 1.0 - my_a**2))
        mz_b = -np.sqrt(max(0.0, 1.0 - my_b**2))
    comps = np.array([[0.0, my_a, mz_a], [0.0, my_b, mz_b]])
    return FixedPoint(BlochState(comps, check=False), physical)


def gamma_crit(params: NetworkParams) -> float:
    """Smallest dissipative coupling at which the two-ensemble fixed point is physical.

    ``max(G1, G2)`` with ``G1 = 2 kappa (Omega_A - kappa) / (2 kappa - (Omega_A - Omega_B))``
    and ``G2`` its mirror image; a negative branch (that ensemble is already
    below threshold on its own) contributes zero.

    Raises
    ------
    OutOfDomainError
        If ``2 kappa -/+ (Omega_A - Omega_B) <= 0``.  Use
        :func:`critical_coupling_search` instead.
    """
    _require_two_dissipative(params)
    (wa, wb), kappa = params.omegas, params.kappas[0]
    d = wa - wb
    den1, den2 = 2 * kappa - d, 2 * kappa + d
    if den1 <= 0 or den2 <= 0:
        raise OutOfDomainError(
            f"detuning {d:g} too large for the closed form (need |Omega_A - Omega_B| < 2 kappa)"
        )
    g1 = 2 * kappa * (wa - kappa) / den1
    g2 = 2 * kappa * (wb - kappa) / den2
    return float(max(g1, g2, 0.0))


def _jacobian_dissipative(params: NetworkParams, m: np.ndarray) -> np.ndarray:
    n = params.n
    c = params.strength / n
    omega, kappa = params.omegas, params.kappas
    sx, sy = m[:, 0].sum(), m[:, 1].sum()
    J = np.zeros((3 * n, 3 * n))
    for a in range(n):
        mx, my, mz = m[a]
        ox, oy = sx - mx, sy - my
        loc = kappa[a] + c
        r = 3 * a
        for b in range(n):
            if b == a:
                continue
            q = 3 * b
            J[r, q] = c * mz
            J[r + 1, q + 1] = c * mz
            J[r + 2, q] = -c * mx
            J[r + 2, q + 1] = -c * my
        J[r, r] = loc * mz
        J[r, r + 2] = loc * mx + c * ox
        J[r + 1, r + 1] = loc * mz
        J[r + 1, r + 2] = -omega[a] + loc * my + c * oy
        J[r + 2, r] = -2 * loc * mx - c * ox
        J[r + 2, r + 1] = omega[a] - 2 * loc * my - c * oy
    return J


def _jacobian_fd(params: NetworkParams, m: np.ndarray, step: float) -> np.ndarray:
    y = m.reshape(-1)
    J = np.empty((y.size, y.size))
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = step
        fp = vector_field(params, (y + e).reshape(-1, 3)).reshape(-1)
        fm = vector_field(params, (y - e).reshape(-1, 3)).reshape(-1)
        J[:, j] = (fp - fm) / (2 * step)
    return J


def jacobian(params: NetworkParams, state, method: str = "auto", step: float = FD_STEP) -> np.ndarray:
    """Jacobian of :func:`vector_field` in the flat ``(mx_0, my_0, mz_0, mx_1, ...)`` ordering.

    ``method="auto"`` uses the analytic form for dissipative coupling and
    central differences with step ``step`` for coherent coupling.
    """
    m = np.asarray(_as_components(params, state), dtype=float)
    if method == "auto":
        method = "analytic" if params.kind is CouplingKind.DISSIPATIVE else "numeric"
    if method == "analytic":
        if params.kind is not CouplingKind.DISSIPATIVE:
            raise UnsupportedConfigurationError("analytic Jacobian is implemented for dissipative coupling only")
        return _jacobian_dissipative(params, m)
    if method == "numeric":
        return _jacobian_fd(params, m, step)
    raise InvalidArgumentError(f"unknown Jacobian method {method!r}")


def stability_at(params: NetworkParams, point, tol: float = 1e-8, method: str = "auto") -> StabilityReport:
    """Linearize at ``point`` and classify the spectrum.

    Oscillatory: some eigenvalue with ``|Im| > tol`` and ``Re > -tol``.
    Marginal: otherwise, some eigenvalue with ``|Re| <= tol``.
    Hyperbolic: everything else.
    """
    state = point.state if isinstance(point, FixedPoint) else point
    J = jacobian(params, state, method)
    if not np.all(np.isfinite(J)):
        raise NumericalFailureError("non-finite Jacobian")
    ev = np.linalg.eigvals(J)
    ev = ev[np.lexsort((-ev.imag, -ev.real))]
    if np.any((np.abs(ev.imag) > tol) & (ev.real > -tol)):
        cls = StabilityClass.OSCILLATORY
    elif np.any(np.abs(ev.real) <= tol):
        cls = StabilityClass.MARGINAL
    else:
        cls = StabilityClass.HYPERBOLIC
    return StabilityReport(ev, cls)


def oscillations_persist(
    params: NetworkParams,
    cfg: IntegrationConfig = ORACLE_CONFIG,
    initial=None,
    threshold: float = AMP_THRESHOLD,
    window_fraction: float = ORACLE_WINDOW,
) -> bool:
    """True when some ensemble's late-time ``m^z`` amplitude exceeds ``threshold``."""
    traj = integrate(params, initial, cfg)
    return any(late_amplitude(traj, a, window_fraction) > threshold for a in range(params.n))


def critical_coupling_search(
    params_template: NetworkParams,
    strength_lo: float,
    strength_hi: float,
    tol: float = 1e-4,
    cfg: IntegrationConfig = ORACLE_CONFIG,
    initial=None,
    threshold: float = AMP_THRESHOLD,
) -> float:
    """Bisect the coupling strength at which persistent oscillations die out.

    The template's coupling kind is kept; only its strength is varied.  The
    bracket must have oscillations at ``strength_lo`` and none at
    ``strength_hi``.  Returns the bracket midpoint once its width is below
    ``tol``.
    """
    if not (0 <= strength_lo < strength_hi):
        raise InvalidArgumentError(f"need 0 <= strength_lo < strength_hi, got {strength_lo}, {strength_hi}")
    if not tol > 0:
        raise InvalidArgumentError(f"tol must be > 0, got {tol!r}")

    def probe(s):
        return oscillations_persist(params_template.with_strength(s), cfg, initial, threshold)

    if not probe(strength_lo):
        raise InvalidBracketError(f"no persistent oscillations at the lower strength {strength_lo:g}")
    if probe(strength_hi):
        raise InvalidBracketError(f"oscillations still persist at the upper strength {strength_hi:g}")
    lo, hi = float(strength_lo), float(strength_hi)
    while hi - lo >= tol:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
