"""Parameter types and the mean-field equations of motion.

Every ensemble is described by its rescaled collective spin
``m_alpha = <S_alpha> / S_alpha``.  In the large-spin limit the network obeys a
closed set of ``3 n`` nonlinear ODEs; :func:`vector_field` evaluates their
right-hand side for either all-to-all dissipative coupling (one shared decay
channel of rate ``Gamma``) or coherent flip-flop exchange of strength ``g``.

Rates are used exactly as given.  The presets and tests adopt ``kappa = 1``,
which makes every rate a multiple of the first ensemble's ``kappa``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numba
import numpy as np

from .exceptions import InvalidArgumentError, StructuralError

__all__ = [
    "BLOCH_NORM_EPS",
    "BlochState",
    "CouplingKind",
    "CouplingSpec",
    "EnsembleParams",
    "NetworkParams",
    "uniform_detuning_ladder",
    "vector_field",
]

#: Slack allowed above the unit Bloch norm before a state counts as unphysical.
BLOCH_NORM_EPS = 1e-9


class CouplingKind(str, enum.Enum):
    DISSIPATIVE = "dissipative"
    COHERENT = "coherent"

    @property
    def code(self) -> int:
        # integer tag understood by the compiled kernels
        return 0 if self is CouplingKind.DISSIPATIVE else 1


@dataclass(frozen=True)
class EnsembleParams:
    """One collective spin: drive ``omega``, decay rate ``kappa``, atom count."""

    omega: float
    kappa: float = 1.0
    n_spins: int = 1

    def __post_init__(self):
        omega, kappa = float(self.omega), float(self.kappa)
        if not np.isfinite(omega) or omega < 0:
            raise InvalidArgumentError(f"omega must be finite and >= 0, got {self.omega!r}")
        if not np.isfinite(kappa) or kappa <= 0:
            raise InvalidArgumentError(f"kappa must be finite and > 0, got {self.kappa!r}")
        if int(self.n_spins) != self.n_spins or self.n_spins < 1:
            raise InvalidArgumentError(f"n_spins must be a positive integer, got {self.n_spins!r}")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "n_spins", int(self.n_spins))


@dataclass(frozen=True)
class CouplingSpec:
    kind: CouplingKind = CouplingKind.DISSIPATIVE
    strength: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CouplingKind(self.kind))
        strength = float(self.strength)
        if not np.isfinite(strength) or strength < 0:
            raise InvalidArgumentError(f"coupling strength must be finite and >= 0, got {self.strength!r}")
        object.__setattr__(self, "strength", strength)


@dataclass(frozen=True)
class NetworkParams:
    """Ordered ensembles plus the coupling that links all of them."""

    ensembles: tuple[EnsembleParams, ...]
    coupling: CouplingSpec = field(default_factory=CouplingSpec)

    def __post_init__(self):
        ensembles = tuple(self.ensembles)
        if len(ensembles) < 1:
            raise InvalidArgumentError("a network needs at least one ensemble")
        for e in ensembles:
            if not isinstance(e, EnsembleParams):
                raise InvalidArgumentError(f"expected EnsembleParams, got {type(e).__name__}")
        object.__setattr__(self, "ensembles", ensembles)

    @classmethod
    def from_omegas(
        cls,
        omegas: Iterable[float],
        kappa: float = 1.0,
        kind: CouplingKind | str = CouplingKind.DISSIPATIVE,
        strength: float = 0.0,
        n_spins: int = 1,
    ) -> "NetworkParams":
        ensembles = tuple(EnsembleParams(w, kappa, n_spins) for w in omegas)
        return cls(ensembles, CouplingSpec(kind, strength))

    @property
    def n(self) -> int:
        return len(self.ensembles)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([e.omega for e in self.ensembles])

    @property
    def kappas(self) -> np.ndarray:
        return np.array([e.kappa for e in self.ensembles])

    @property
    def kind(self) -> CouplingKind:
        return self.coupling.kind

    @property
    def strength(self) -> float:
        return self.coupling.strength

    def with_strength(self, strength: float) -> "NetworkParams":
        return replace(self, coupling=CouplingSpec(self.coupling.kind, strength))

    def with_coupling(self, kind: CouplingKind | str, strength: float) -> "NetworkParams":
        return replace(self, coupling=CouplingSpec(kind, strength))

    def with_omegas(self, omegas: Sequence[float]) -> "NetworkParams":
        if len(omegas) != self.n:
            raise StructuralError(f"expected {self.n} drives, got {len(omegas)}")
        ensembles = tuple(replace(e, omega=w) for e, w in zip(self.ensembles, omegas))
        return replace(self, ensembles=ensembles)

    def scaled(self, c: float) -> "NetworkParams":
        """Multiply every rate (drives, decay rates, coupling) by ``c``."""
        ensembles = tuple(replace(e, omega=c * e.omega, kappa=c * e.kappa) for e in self.ensembles)
        return NetworkParams(ensembles, CouplingSpec(self.kind, c * self.strength))

    def to_dict(self) -> dict:
        return {
            "ensembles": [
                {"omega": e.omega, "kappa": e.kappa, "n_spins": e.n_spins} for e in self.ensembles
            ],
            "coupling": {"kind": self.kind.value, "strength": self.strength},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkParams":
        ensembles = tuple(EnsembleParams(**e) for e in data["ensembles"])
        coupling = CouplingSpec(**data.get("coupling", {}))
        return cls(ensembles, coupling)


class BlochState:
    """Mean-field state: one Bloch vector ``(mx, my, mz)`` per ensemble.

    Stored as a float array of shape ``(n, 3)``.  Vectors may lie inside the
    unit ball but not outside it (up to :data:`BLOCH_NORM_EPS`).
    """

    __slots__ = ("components",)

    def __init__(self, components, *, check: bool = True):
        arr = np.array(components, dtype=float)
        if arr.ndim == 1 and arr.size % 3 == 0:
            arr = arr.reshape(-1, 3)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
            raise StructuralError(f"Bloch state must have shape (n, 3), got {np.shape(components)}")
        if check:
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError("Bloch state contains non-finite values")
            norms = np.linalg.norm(arr, axis=1)
            if np.any(norms > 1.0 + BLOCH_NORM_EPS):
                raise InvalidArgumentError(
                    f"Bloch vector norm exceeds 1: max |m| = {norms.max():.12g}"
                )
        arr.setflags(write=False)
        self.components = arr

    @classmethod
    def polarized(cls, n: int, direction=(0.0, 0.0, 1.0)) -> "BlochState":
        """All ``n`` ensembles fully polarized along ``direction`` (default +z)."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        return cls(np.tile(d, (n, 1)))

    @property
    def n(self) -> int:
        return self.components.shape[0]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.components, axis=1)

    def flat(self) -> np.ndarray:
        return self.components.reshape(-1).copy()

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.components, dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, BlochState):
            return NotImplemented
        return np.array_equal(self.components, other.components)

    def __repr__(self):
        rows = ", ".join("(" + ", ".join(f"{v:.6g}" for v in row) + ")" for row in self.components)
        return f"BlochState([{rows}])"


@numba.njit(cache=True, nogil=True)
def _field_into(y, omega, kappa, strength, kind, out):
    # y, out: flat (3n,) arrays laid out as mx_0, my_0, mz_0, mx_1, ...
    n = omega.shape[0]
    sx = 0.0
    sy = 0.0
    for a in range(n):
        sx += y[3 * a]
        sy += y[3 * a + 1]
    c = strength / n
    for a in range(n):
        mx = y[3 * a]
        my = y[3 * a + 1]
        mz = y[3 * a + 2]
        ox = sx - mx  # sum over the other ensembles
        oy = sy - my
        if kind == 0:
            loc = kappa[a] + c
            out[3 * a] = loc * mx * mz + c * mz * ox
            out[3 * a + 1] = -omega[a] * mz + loc * my * mz + c * mz * oy
            out[3 * a + 2] = omega[a] * my - loc * (mx * mx + my * my) - c * (mx * ox + my * oy)
        else:
            k = kappa[a]
            out[3 * a] = k * mx * mz + c * mz * oy
            out[3 * a + 1] = -omega[a] * mz + k * my * mz - c * mz * ox
            out[3 * a + 2] = omega[a] * my - k * (mx * mx + my * my) + c * (my * ox - mx * oy)


def _as_components(params: NetworkParams, state) -> np.ndarray:
    if isinstance(state, BlochState):
        arr = state.components
    else:
        arr = np.asarray(state, dtype=float)
        if arr.ndim == 1 and arr.size % 3 == 0:
            arr = arr.reshape(-1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise StructuralError(f"state must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] != params.n:
        raise StructuralError(f"state has {arr.shape[0]} ensembles but params has {params.n}")
    return arr


def vector_field(params: NetworkParams, state) -> np.ndarray:
    """Time derivative of every Bloch component.

    Parameters
    ----------
    params : NetworkParams
        Drives, decay rates and coupling.  ``params.kind`` selects the
        dissipative or the coherent equation set.
    state : BlochState or array_like of shape (n, 3)

    Returns
    -------
    ndarray of shape (n, 3)
        ``d m_alpha^k / dt``.

    Notes
    -----
    Dissipative coupling adds ``Gamma/n`` to each local decay rate and couples
    ensemble ``alpha`` to the others through ``(Gamma/n) sum_{beta != alpha}``.
    Coherent exchange keeps the local rate ``kappa`` and rotates each spin
    about the summed transverse field of the others with weight ``g/n``.  In
    both cases ``m_alpha . dm_alpha/dt = 0`` identically, so Bloch norms are
    conserved by the exact flow.
    """
    arr = _as_components(params, state)
    y = np.ascontiguousarray(arr.reshape(-1), dtype=float)
    out = np.empty_like(y)
    _field_into(y, params.omegas, params.kappas, params.strength, params.kind.code, out)
    return out.reshape(-1, 3)


def uniform_detuning_ladder(
    n: int, omega_max: float, delta_omega: float, kappa: float = 1.0
) -> NetworkParams:
    """Drives spread evenly over ``[omega_max - delta_omega, omega_max]``.

    ``Omega_alpha = omega_max - alpha * delta_omega / (n - 1)``; the coupling
    is left at zero strength for the caller to fill in.
    """
    if int(n) != n or n < 2:
        raise InvalidArgumentError(f"a detuning ladder needs n >= 2 ensembles, got {n!r}")
    if delta_omega < 0:
        raise InvalidArgumentError(f"delta_omega must be >= 0, got {delta_omega!r}")
    step = delta_omega / (n - 1)
    return NetworkParams.from_omegas([omega_max - a * step for a in range(int(n))], kappa=kappa)
