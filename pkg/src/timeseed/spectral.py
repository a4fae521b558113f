"""Finite-size Liouvillian of two coupled collective spins.

Each ensemble is kept in its maximal-spin (Dicke) sector of dimension
``N_alpha + 1``; every operator in the master equation is collective, so
permutation-symmetric initial states never leave it.  Density matrices are
vectorized by stacking columns, ``vec(A rho B) = (B^T kron A) vec(rho)``.

Because the generator preserves Hermiticity it is real in a basis of
Hermitian matrices.  Dense diagonalization and real-shift shift-invert
solve run in that basis: real arithmetic is cheaper and returns exactly
conjugate-paired spectra.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigs, expm_multiply
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_consistent_length, check_is_fitted

from .exceptions import (
    FormatError,
    InvalidArgumentError,
    ResourceError,
    SolverError,
    StructuralError,
)
from .integrator import IntegrationConfig
from .model import CouplingKind, NetworkParams

__all__ = [
    "DEFAULT_DENSE_CAP",
    "STEADY_SHIFT",
    "DickeSpace",
    "FiniteSizeTrajectory",
    "InverseSizeExpansion",
    "ScalingFit",
    "SpectrumResult",
    "build_liouvillian",
    "dense_cap",
    "dominant_ladder",
    "finite_size_trajectory",
    "hermitian_basis",
    "load_coo",
    "polarized_density",
    "save_coo",
    "scaling_fit",
    "slow_spectrum",
    "spin_operators",
]

DEFAULT_DENSE_CAP = 4096
#: Largest Liouvillian dimension ``build_liouvillian`` agrees to assemble (N = 38).
DEFAULT_MAX_DIM = 160_000
IM_TOL = 1e-7
ZERO_TOL = 1e-10
#: Real shift used to reach the steady state; sigma = 0 itself is an eigenvalue.
STEADY_SHIFT = 1e-2


def dense_cap() -> int:
    """Dense-solver dimension cap, overridable through ``TIMESEED_DENSE_CAP``."""
    raw = os.environ.get("TIMESEED_DENSE_CAP")
    if raw is None:
        return DEFAULT_DENSE_CAP
    try:
        cap = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"TIMESEED_DENSE_CAP must be an integer, got {raw!r}") from None
    if cap < 1:
        raise InvalidArgumentError(f"TIMESEED_DENSE_CAP must be positive, got {cap}")
    return cap


@dataclass(frozen=True)
class DickeSpace:
    n_a: int
    n_b: int

    def __post_init__(self):
        for name in ("n_a", "n_b"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {v!r}")

    @classmethod
    def symmetric(cls, n_total: int) -> "DickeSpace":
        """Split an even total atom number equally, ``N_A = N_B = N / 2``."""
        if n_total % 2 or n_total < 2:
            raise InvalidArgumentError(f"total atom number must be even and >= 2, got {n_total}")
        return cls(n_total // 2, n_total // 2)

    @property
    def dims(self) -> tuple[int, int]:
        return self.n_a + 1, self.n_b + 1

    @property
    def n_total(self) -> int:
        return self.n_a + self.n_b

    @property
    def hilbert_dim(self) -> int:
        da, db = self.dims
        return da * db

    @property
    def liouvillian_dim(self) -> int:
        return self.hilbert_dim**2


def spin_operators(n_atoms: int) -> dict[str, sp.csr_matrix]:
    """Collective spin matrices for spin ``S = n_atoms / 2``.

    Basis ordered ``|S, S>, |S, S-1>, ..., |S, -S>``.  Keys: ``x, y, z, +, -``.
    """
    s = n_atoms / 2
    m = s - np.arange(n_atoms + 1)
    # <m+1| S+ |m> = sqrt(s(s+1) - m(m+1))
    up = np.sqrt(s * (s + 1) - m[1:] * (m[1:] + 1))
    splus = sp.diags(up, 1, format="csr", dtype=complex)
    sminus = splus.T.tocsr()
    return {
        "+": splus,
        "-": sminus,
        "x": ((splus + sminus) / 2).tocsr(),
        "y": ((splus - sminus) / 2j).tocsr(),
        "z": sp.diags(m.astype(complex), 0, format="csr"),
    }


def _spre(a):
    return sp.kron(sp.identity(a.shape[0], format="csr"), a, format="csr")


def _spost(a):
    return sp.kron(a.T, sp.identity(a.shape[0], format="csr"), format="csr")


def _dissipator(c):
    cdc = (c.conj().T @ c).tocsr()
    return sp.kron(c.conj(), c, format="csr") - 0.5 * _spre(cdc) - 0.5 * _spost(cdc)


def build_liouvillian(params: NetworkParams, space: DickeSpace, max_dim: int = DEFAULT_MAX_DIM) -> sp.csr_matrix:
    """Sparse generator of the two-ensemble master equation.

    ``H = sum_a Omega_a S^x_a``; each ensemble decays collectively at rate
    ``kappa_a / S_a``.  Dissipative coupling adds ``(Gamma / S) D[S^-_A + S^-_B]``
    and coherent coupling adds ``(g / 2S)(S^+_A S^-_B + S^-_A S^+_B)`` to ``H``,
    with ``S = S_A + S_B``.
    """
    if params.n != 2:
        raise StructuralError(f"finite-size treatment covers two ensembles, got n = {params.n}")
    if space.liouvillian_dim > max_dim:
        raise ResourceError(
            f"Liouvillian dimension {space.liouvillian_dim} exceeds the cap {max_dim}; "
            "raise max_dim or reduce the atom numbers"
        )
    ops_a, ops_b = spin_operators(space.n_a), spin_operators(space.n_b)
    eye_a = sp.identity(space.n_a + 1, format="csr")
    eye_b = sp.identity(space.n_b + 1, format="csr")

    def on_a(op):
        return sp.kron(op, eye_b, format="csr")

    def on_b(op):
        return sp.kron(eye_a, op, format="csr")

    s_a, s_b = space.n_a / 2, space.n_b / 2
    s_tot = s_a + s_b
    (wa, wb), (ka, kb) = params.omegas, params.kappas
    strength = params.strength

    H = wa * on_a(ops_a["x"]) + wb * on_b(ops_b["x"])
    if params.kind is CouplingKind.COHERENT and strength > 0:
        exchange = sp.kron(ops_a["+"], ops_b["-"]) + sp.kron(ops_a["-"], ops_b["+"])
        H = H + strength / (2 * s_tot) * exchange
    minus_a, minus_b = on_a(ops_a["-"]), on_b(ops_b["-"])

    L = -1j * (_spre(H) - _spost(H))
    L = L + (ka / s_a) * _dissipator(minus_a) + (kb / s_b) * _dissipator(minus_b)
    if params.kind is CouplingKind.DISSIPATIVE and strength > 0:
        L = L + (strength / s_tot) * _dissipator((minus_a + minus_b).tocsr())
    L = L.tocsr()
    L.sum_duplicates()
    L.eliminate_zeros()
    return L


def hermitian_basis(d: int) -> sp.csr_matrix:
    """Unitary ``U`` whose columns are vectorized orthonormal Hermitian matrices.

    For a Hermiticity-preserving generator ``L`` the matrix ``U^H L U`` is real.
    Column order: diagonal units, then for each ``j < k`` the symmetric and the
    antisymmetric combination.
    """
    rows, cols, vals = [], [], []
    col = 0
    for j in range(d):
        rows.append(j + j * d)
        cols.append(col)
        vals.append(1.0)
        col += 1
    r = 1 / np.sqrt(2)
    for j in range(d):
        for k in range(j + 1, d):
            jk, kj = j + k * d, k + j * d  # vec index of E_jk and E_kj
            rows += [jk, kj]
            cols += [col, col]
            vals += [r, r]
            col += 1
            rows += [jk, kj]
            cols += [col, col]
            vals += [1j * r, -1j * r]
            col += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(d * d, d * d), dtype=complex)


def _to_real(L: sp.spmatrix) -> sp.csr_matrix:
    d = int(round(np.sqrt(L.shape[0])))
    if d * d != L.shape[0]:
        raise StructuralError(f"superoperator dimension {L.shape[0]} is not a perfect square")
    U = hermitian_basis(d)
    R = (U.conj().T @ L @ U).tocsr()
    scale = max(abs(R.data).max(), 1.0) if R.nnz else 1.0
    if R.nnz and abs(R.data.imag).max() > 1e-10 * scale:
        raise StructuralError("generator does not preserve Hermiticity")
    R = sp.csr_matrix(R.real)
    R.eliminate_zeros()
    return R


@dataclass(frozen=True)
class SpectrumResult:
    """Slow part of a Liouvillian spectrum.

    ``eigenvalues`` holds every eigenvalue the solver produced (the full
    spectrum on the dense path), sorted by real part, descending.
    ``dominant`` is the oscillating eigenvalue (``Im > im_tol``) with the
    largest real part; ``second_dominant`` the next one.  Either is ``nan``
    when absent.
    """

    eigenvalues: np.ndarray
    dominant: complex
    second_dominant: complex
    steady_count: int
    method: str
    dim: int

    def top(self, k: int) -> np.ndarray:
        return self.eigenvalues[:k]


def _sort_desc(ev: np.ndarray) -> np.ndarray:
    return ev[np.lexsort((-ev.imag, -ev.real))]


def _dedupe(ev: np.ndarray, tol: float) -> np.ndarray:
    kept: list[complex] = []
    for z in _sort_desc(ev):
        if not any(abs(z - w) <= tol * max(1.0, abs(z)) for w in kept):
            kept.append(z)
    return np.array(kept, dtype=complex)


def _summarize(ev, method, dim, im_tol, zero_tol) -> SpectrumResult:
    ev = _sort_desc(np.asarray(ev, dtype=complex))
    osc = ev[ev.imag > im_tol]
    dominant = complex(osc[0]) if len(osc) > 0 else complex(np.nan, np.nan)
    second = complex(osc[1]) if len(osc) > 1 else complex(np.nan, np.nan)
    steady = int(np.sum(np.abs(ev) < zero_tol))
    return SpectrumResult(ev, dominant, second, steady, method, dim)


def slow_spectrum(
    liouvillian: sp.spmatrix,
    k: int = 12,
    shifts: Sequence[complex] = (STEADY_SHIFT,),
    dense_cap_: int | None = None,
    im_tol: float = IM_TOL,
    zero_tol: float = ZERO_TOL,
    arpack_tol: float = 0.0,
    maxiter: int | None = None,
) -> SpectrumResult:
    """Eigenvalues with the largest real parts.

    Dimensions up to the dense cap are diagonalized completely.  Larger ones
    use shift-invert Arnoldi: ``k`` eigenvalues nearest each entry of
    ``shifts`` are computed and merged.  To catch the oscillating pair, pass
    a shift close to it (see :func:`dominant_ladder`), but not exactly on
    an eigenvalue: the factorization then becomes singular.

    Raises
    ------
    SolverError
        ARPACK did not converge; ``diagnostics`` carries the shift and the
        eigenvalues that did converge.
    """
    if k < 3:
        raise InvalidArgumentError(f"k must be >= 3, got {k}")
    dim = liouvillian.shape[0]
    cap = dense_cap() if dense_cap_ is None else dense_cap_
    if dim <= cap:
        R = _to_real(liouvillian).toarray()
        ev = scipy.linalg.eigvals(R, overwrite_a=True, check_finite=False)
        return _summarize(ev, "dense", dim, im_tol, zero_tol)

    if not shifts:
        raise InvalidArgumentError("the iterative path needs at least one shift")
    k_eff = min(k, dim - 2)
    R = None
    found = []
    for sigma in shifts:
        sigma = complex(sigma)
        try:
            if sigma.imag == 0.0:
                if R is None:
                    R = _to_real(liouvillian).tocsc()
                vals = eigs(R, k=k_eff, sigma=sigma.real, which="LM", tol=arpack_tol,
                            maxiter=maxiter, return_eigenvectors=False)
                # conjugate partners of complex eigenvalues of a real matrix
                vals = np.concatenate([vals, np.conj(vals[np.abs(vals.imag) > im_tol])])
            else:
                vals = eigs(liouvillian.tocsc(), k=k_eff, sigma=sigma, which="LM", tol=arpack_tol,
                            maxiter=maxiter, return_eigenvectors=False)
        except ArpackNoConvergence as exc:
            raise SolverError(
                f"shift-invert Arnoldi did not converge at sigma = {sigma}",
                diagnostics={"sigma": sigma, "converged": np.asarray(exc.eigenvalues), "k": k_eff},
            ) from exc
        found.append(np.asarray(vals))
    ev = _dedupe(np.concatenate(found), 1e-9)
    if np.any(ev.real > 1e-8):
        raise SolverError(
            "shift-invert Arnoldi returned eigenvalues in the right half-plane",
            diagnostics={"eigenvalues": ev[ev.real > 1e-8], "shifts": list(shifts)},
        )
    return _summarize(ev, "shift-invert", dim, im_tol, zero_tol)


def dominant_ladder(
    params: NetworkParams,
    sizes: Sequence[int],
    k: int = 12,
    dense_cap_: int | None = None,
    max_dim: int = DEFAULT_MAX_DIM,
) -> list[SpectrumResult]:
    """Spectra along a ladder of even total atom numbers ``N = 2 N_A``.

    Beyond the dense cap, the shift for the oscillating pair is predicted from
    the previous rungs (linear in ``1/N``); a small real shift for the steady
    state is always added.  A first rung above the cap probes a few points on
    the imaginary axis instead.
    """
    sizes = [int(s) for s in sizes]
    if sorted(set(sizes)) != sizes:
        raise InvalidArgumentError("sizes must be strictly increasing")
    results: list[SpectrumResult] = []
    history: list[tuple[int, complex]] = []
    for n_total in sizes:
        space = DickeSpace.symmetric(n_total)
        L = build_liouvillian(params, space, max_dim)
        shifts: list[complex] = [STEADY_SHIFT]
        if history:
            if len(history) >= 2:
                (n1, l1), (n2, l2) = history[-2:]
                slope = (l2 - l1) / (1 / n2 - 1 / n1)
                guess = l2 + slope * (1 / n_total - 1 / n2)
            else:
                guess = history[-1][1]
            shifts.append(complex(min(guess.real, 0.0), guess.imag))
        else:
            cap = dense_cap() if dense_cap_ is None else dense_cap_
            if space.liouvillian_dim > cap:
                # no prior rung: probe along the imaginary axis up to the drive scale
                top = float(np.max(params.omegas)) + params.strength
                shifts += [1j * y for y in np.linspace(0.25, 1.0, 4) * top]
        res = slow_spectrum(L, k=k, shifts=shifts, dense_cap_=dense_cap_)
        results.append(res)
        if np.isfinite(res.dominant):
            history.append((n_total, res.dominant))
    return results


class InverseSizeExpansion(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``F(N) = sum_{i=0}^{mu} a_i / N^i``.

    ``intercept_`` is ``a_0``, the ``N -> infinity`` limit; ``coef_`` holds all
    ``a_0 .. a_mu``.
    """

    def __init__(self, mu=4):
        self.mu = mu

    def _design(self, sizes, scale):
        x = scale / np.asarray(sizes, dtype=float)
        return np.vander(x, self.mu + 1, increasing=True)

    def fit(self, X, y):
        sizes = np.asarray(X, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        check_consistent_length(sizes, y)
        if int(self.mu) != self.mu or self.mu < 0:
            raise InvalidArgumentError(f"mu must be a non-negative integer, got {self.mu!r}")
        if np.any(sizes <= 0) or len(np.unique(sizes)) != len(sizes):
            raise InvalidArgumentError("sizes must be distinct and positive")
        if len(sizes) < self.mu + 1:
            raise InvalidArgumentError(
                f"fit of order mu = {self.mu} needs at least {self.mu + 1} sizes, got {len(sizes)}"
            )
        # rescale 1/N by the smallest size so the columns stay O(1)
        scale = float(sizes.min())
        A = self._design(sizes, scale)
        b, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ b
        self.scale_ = scale
        self.coef_ = b * scale ** np.arange(self.mu + 1)
        self.intercept_ = float(self.coef_[0])
        self.residual_ = float(np.sqrt(np.mean(resid**2)))
        dof = len(sizes) - (self.mu + 1)
        if dof > 0:
            s2 = float(resid @ resid) / dof
            cov = s2 * np.linalg.pinv(A.T @ A)
            self.intercept_stderr_ = float(np.sqrt(max(cov[0, 0], 0.0)))
        else:
            self.intercept_stderr_ = float("nan")
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        sizes = np.asarray(X, dtype=float).reshape(-1)
        x = 1.0 / sizes
        return np.vander(x, self.mu + 1, increasing=True) @ self.coef_


@dataclass(frozen=True)
class ScalingFit:
    coefficients: np.ndarray
    mu: int
    residual: float
    extrapolated: float
    extrapolated_stderr: float = float("nan")


def scaling_fit(sizes: Sequence[int], values: Sequence[float], mu: int) -> ScalingFit:
    """Fit ``values(N)`` by a polynomial of degree ``mu`` in ``1/N``."""
    est = InverseSizeExpansion(mu=mu).fit(sizes, values)
    return ScalingFit(est.coef_.copy(), int(mu), est.residual_, est.intercept_, est.intercept_stderr_)


@dataclass(frozen=True)
class FiniteSizeTrajectory:
    """``mz[:, a] = <S^z_a> / S_a`` sampled at ``times``; ``trace`` is ``Tr rho(t)``."""

    times: np.ndarray
    mz: np.ndarray
    trace: np.ndarray


def polarized_density(space: DickeSpace) -> np.ndarray:
    """Vectorized ``|S_A, S_A> |S_B, S_B>`` projector (all spins up)."""
    d = space.hilbert_dim
    rho = np.zeros(d * d, dtype=complex)
    rho[0] = 1.0
    return rho


def finite_size_trajectory(
    params: NetworkParams,
    space: DickeSpace,
    cfg: IntegrationConfig,
    initial: np.ndarray | None = None,
    max_dim: int | None = None,
) -> FiniteSizeTrajectory:
    """Propagate the master equation and record ``<m^z_A>``, ``<m^z_B>``.

    ``initial`` is a density matrix (``d x d``) or its column-stacked vector;
    the default is the fully polarized product state.
    """
    cap = dense_cap() if max_dim is None else max_dim
    if space.liouvillian_dim > cap:
        raise ResourceError(
            f"Liouvillian dimension {space.liouvillian_dim} exceeds the cap {cap} for direct propagation"
        )
    L = build_liouvillian(params, space).tocsc()
    d = space.hilbert_dim
    if initial is None:
        rho0 = polarized_density(space)
    else:
        rho0 = np.asarray(initial, dtype=complex)
        if rho0.shape == (d, d):
            rho0 = rho0.reshape(-1, order="F")
        if rho0.shape != (d * d,):
            raise StructuralError(f"initial state must be {d}x{d} or length {d * d}")
    n_out = cfg.n_samples
    t_stop = (n_out - 1) * cfg.dt_out
    rhos = expm_multiply(L, rho0, start=0.0, stop=t_stop, num=n_out, endpoint=True)

    ops_a, ops_b = spin_operators(space.n_a), spin_operators(space.n_b)
    za = sp.kron(ops_a["z"], sp.identity(space.n_b + 1)).diagonal().real / (space.n_a / 2)
    zb = sp.kron(sp.identity(space.n_a + 1), ops_b["z"]).diagonal().real / (space.n_b / 2)
    diag = rhos[:, :: d + 1]  # diagonal entries of each column-stacked rho
    mz = np.column_stack([(diag * za).sum(axis=1).real, (diag * zb).sum(axis=1).real])
    trace = diag.sum(axis=1)
    times = np.arange(n_out) * cfg.dt_out
    return FiniteSizeTrajectory(times, mz, trace.real)


def save_coo(L: sp.spmatrix, path) -> None:
    """Write ``row col re im`` lines (0-based) after a ``# shape`` header."""
    coo = sp.coo_matrix(L)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# timeseed-liouvillian-coo v1 shape {coo.shape[0]} {coo.shape[1]} nnz {coo.nnz}\n")
        for i in order:
            v = coo.data[i]
            fh.write(f"{coo.row[i]} {coo.col[i]} {v.real:.17g} {v.imag:.17g}\n")


def load_coo(path) -> sp.csr_matrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        body = fh.read()
    if (
        len(header) != 8
        or header[:4] != ["#", "timeseed-liouvillian-coo", "v1", "shape"]
        or header[6] != "nnz"
    ):
        raise FormatError(f"{path}: not a timeseed Liouvillian export (v1)")
    try:
        shape = (int(header[4]), int(header[5]))
        nnz = int(header[7])
        rows = [line.split() for line in body.splitlines() if line.strip()]
        if len(rows) != nnz or any(len(r) != 4 for r in rows):
            raise ValueError(f"expected {nnz} rows of 'row col re im'")
        data = np.array(rows, dtype=float).reshape(nnz, 4)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    r, c = data[:, 0].astype(int), data[:, 1].astype(int)
    if nnz and (r.min() < 0 or c.min() < 0 or r.max() >= shape[0] or c.max() >= shape[1]):
        raise FormatError(f"{path}: entry index outside shape {shape}")
    return sp.csr_matrix((data[:, 2] + 1j * data[:, 3], (r, c)), shape=shape)
