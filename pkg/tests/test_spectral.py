import numpy as np
import pytest
import scipy.linalg
from sklearn.base import clone

from oracles import single_ensemble_generator, two_ensemble_generator
from timeseed.exceptions import FormatError, InvalidArgumentError, ResourceError, StructuralError
from timeseed.integrator import IntegrationConfig
from timeseed.model import NetworkParams
from timeseed.spectral import (
    STEADY_SHIFT,
    DickeSpace,
    InverseSizeExpansion,
    build_liouvillian,
    dense_cap,
    dominant_ladder,
    finite_size_trajectory,
    hermitian_basis,
    load_coo,
    polarized_density,
    save_coo,
    scaling_fit,
    slow_spectrum,
    spin_operators,
)

FIG1 = NetworkParams.from_omegas([1.5, 0.9], strength=0.1)
# dense diagonalization of the independently assembled generator (tests/oracles.py), N_A = N_B = 3
LAMBDA1_N6 = -0.7529514770805908 + 1.1411132504198942j
LAMBDA2_N6 = -0.911281903261318 + 0.4811370700305067j


def test_dicke_space_dimensions():
    s = DickeSpace(3, 5)
    assert s.dims == (4, 6)
    assert s.n_total == 8
    assert s.hilbert_dim == 24
    assert s.liouvillian_dim == 576
    assert DickeSpace.symmetric(10) == DickeSpace(5, 5)
    with pytest.raises(InvalidArgumentError):
        DickeSpace.symmetric(7)
    with pytest.raises(InvalidArgumentError):
        DickeSpace(0, 2)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_spin_operator_algebra(n):
    S = {k: v.toarray() for k, v in spin_operators(n).items()}
    np.testing.assert_allclose(S["x"] @ S["y"] - S["y"] @ S["x"], 1j * S["z"], atol=1e-13)
    s = n / 2
    casimir = S["x"] @ S["x"] + S["y"] @ S["y"] + S["z"] @ S["z"]
    np.testing.assert_allclose(casimir, s * (s + 1) * np.eye(n + 1), atol=1e-12)
    assert S["z"][0, 0] == s


@pytest.mark.parametrize("kind, strength", [("dissipative", 0.0), ("dissipative", 0.37), ("coherent", 0.61)])
@pytest.mark.parametrize("n_a, n_b", [(1, 1), (2, 3), (3, 3)])
def test_liouvillian_matches_basis_action_reference(kind, strength, n_a, n_b):
    p = NetworkParams.from_omegas([1.3, 0.8], kind=kind, strength=strength)
    ours = build_liouvillian(p, DickeSpace(n_a, n_b)).toarray()
    ref = two_ensemble_generator(1.3, 0.8, 1.0, 1.0, n_a, n_b, strength, kind)
    np.testing.assert_allclose(ours, ref, atol=1e-13)


@pytest.mark.parametrize("kind", ["dissipative", "coherent"])
def test_trace_preservation_for_smallest_space(kind):
    p = NetworkParams.from_omegas([0.7, 1.9], kind=kind, strength=0.45)
    L = build_liouvillian(p, DickeSpace(1, 1)).toarray()
    assert L.shape == (16, 16)
    vec_identity = np.eye(4).reshape(-1, order="F")
    np.testing.assert_allclose(vec_identity @ L, 0.0, atol=1e-14)


def test_uncoupled_spectrum_is_pairwise_sum():
    for n_a, n_b in [(2, 2), (3, 4), (4, 4)]:
        p = NetworkParams.from_omegas([1.4, 0.6])
        ev = np.linalg.eigvals(build_liouvillian(p, DickeSpace(n_a, n_b)).toarray())
        ea = np.linalg.eigvals(single_ensemble_generator(1.4, 1.0, n_a))
        eb = np.linalg.eigvals(single_ensemble_generator(0.6, 1.0, n_b))
        sums = (ea[:, None] + eb[None, :]).ravel()
        # every eigenvalue pairs with a sum and vice versa
        assert max(np.min(np.abs(sums - z)) for z in ev) < 1e-8
        assert max(np.min(np.abs(ev - z)) for z in sums) < 1e-8


def test_hermiticity_is_preserved():
    rng = np.random.default_rng(2)
    space = DickeSpace(2, 3)
    L = build_liouvillian(FIG1, space)
    d = space.hilbert_dim
    X = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = X + X.conj().T
    out = (L @ rho.reshape(-1, order="F")).reshape(d, d, order="F")
    np.testing.assert_allclose(out, out.conj().T, atol=1e-12)


def test_hermitian_basis_is_unitary():
    U = hermitian_basis(4).toarray()
    np.testing.assert_allclose(U.conj().T @ U, np.eye(16), atol=1e-14)


def test_dense_spectrum_properties():
    L = build_liouvillian(FIG1, DickeSpace.symmetric(6))
    res = slow_spectrum(L, k=12)
    assert res.method == "dense"
    assert res.steady_count == 1
    assert res.eigenvalues.real.max() <= 1e-10
    ev = res.eigenvalues
    assert max(np.min(np.abs(ev - np.conj(z))) for z in ev) < 1e-8
    assert abs(res.dominant - LAMBDA1_N6) < 1e-8
    assert abs(res.second_dominant - LAMBDA2_N6) < 1e-8
    assert res.second_dominant.real < res.dominant.real
    # the full complex-matrix diagonalization gives the same lambda_1
    full = scipy.linalg.eigvals(L.toarray())
    osc = full[full.imag > 1e-7]
    assert abs(osc[np.argmax(osc.real)] - res.dominant) < 1e-8


@pytest.mark.parametrize("strength", [0.1, 0.714285714285714])
def test_dense_and_iterative_agree(strength):
    L = build_liouvillian(FIG1.with_strength(strength), DickeSpace.symmetric(10))
    dense = slow_spectrum(L, k=12)
    shift = dense.dominant + STEADY_SHIFT  # near, but not on, lambda_1
    it = slow_spectrum(L, k=12, shifts=(STEADY_SHIFT, shift), dense_cap_=0)
    assert it.method == "shift-invert"
    assert abs(it.dominant - dense.dominant) < 1e-7
    for z in it.eigenvalues:
        assert np.min(np.abs(dense.eigenvalues - z)) < 1e-7
    assert it.steady_count == 1


def test_iterative_path_rejects_missing_shifts_and_small_k():
    L = build_liouvillian(FIG1, DickeSpace.symmetric(4))
    with pytest.raises(InvalidArgumentError):
        slow_spectrum(L, k=2)
    with pytest.raises(InvalidArgumentError):
        slow_spectrum(L, shifts=(), dense_cap_=0)


def test_dominant_ladder_short():
    sizes = [4, 6, 8, 10]
    ladder = dominant_ladder(FIG1, sizes)
    re = [r.dominant.real for r in ladder]
    assert np.all(np.diff(re) > 0)
    assert abs(ladder[1].dominant - LAMBDA1_N6) < 1e-8
    with pytest.raises(InvalidArgumentError):
        dominant_ladder(FIG1, [6, 4])


def test_dominant_ladder_iterative_matches_dense():
    sizes = [6, 10, 12]
    dense = dominant_ladder(FIG1, sizes, dense_cap_=10**6)
    it = dominant_ladder(FIG1, sizes, dense_cap_=0)
    for a, b in zip(dense, it):
        assert abs(a.dominant - b.dominant) < 1e-7


def test_resource_cap():
    with pytest.raises(ResourceError):
        build_liouvillian(FIG1, DickeSpace.symmetric(20), max_dim=10_000)
    with pytest.raises(StructuralError):
        build_liouvillian(NetworkParams.from_omegas([1.0, 1.0, 1.0]), DickeSpace(2, 2))


def test_dense_cap_environment_override(monkeypatch):
    monkeypatch.setenv("TIMESEED_DENSE_CAP", "50")
    assert dense_cap() == 50
    L = build_liouvillian(FIG1, DickeSpace.symmetric(4))
    assert slow_spectrum(L, shifts=(STEADY_SHIFT, LAMBDA1_N6)).method == "shift-invert"
    monkeypatch.setenv("TIMESEED_DENSE_CAP", "lots")
    with pytest.raises(InvalidArgumentError):
        dense_cap()
    monkeypatch.delenv("TIMESEED_DENSE_CAP")
    assert dense_cap() == 4096


def test_scaling_fit_recovers_polynomial():
    coeffs = np.array([0.89, -1.3, 4.2, -2.5])
    sizes = np.array([6, 10, 14, 18, 22, 26])
    values = sum(c / sizes**i for i, c in enumerate(coeffs))
    fit = scaling_fit(sizes, values, mu=3)
    np.testing.assert_allclose(fit.coefficients, coeffs, atol=1e-10)
    assert fit.extrapolated == pytest.approx(0.89, abs=1e-10)
    assert fit.mu == 3 and fit.residual < 1e-12
    exact = scaling_fit(sizes[:4], values[:4], mu=3)
    np.testing.assert_allclose(exact.coefficients, coeffs, atol=1e-10)


def test_scaling_fit_rejects_underdetermined_and_duplicate_sizes():
    with pytest.raises(InvalidArgumentError):
        scaling_fit([6, 10, 14, 18], [1, 2, 3, 4], mu=4)
    with pytest.raises(InvalidArgumentError):
        scaling_fit([6, 6, 10], [1, 2, 3], mu=1)
    with pytest.raises(InvalidArgumentError):
        scaling_fit([0, 6, 10], [1, 2, 3], mu=1)


def test_inverse_size_expansion_estimator_api():
    est = InverseSizeExpansion(mu=2)
    assert est.get_params() == {"mu": 2}
    assert clone(est).mu == 2
    sizes = np.array([4.0, 8.0, 12.0, 16.0])
    y = 1.0 + 2.0 / sizes - 3.0 / sizes**2
    est.fit(sizes.reshape(-1, 1), y)
    assert est.intercept_ == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(est.predict([[20.0], [1e12]]), [1 + 0.1 - 3 / 400, 1.0], atol=1e-10)
    assert est.score(sizes.reshape(-1, 1), y) == pytest.approx(1.0)


def test_finite_size_trajectory_trace_and_decay_rate():
    space = DickeSpace.symmetric(6)
    traj = finite_size_trajectory(FIG1, space, IntegrationConfig(t_end=40.0, dt_out=0.02))
    np.testing.assert_allclose(traj.trace, 1.0, atol=1e-9)
    assert traj.mz[0].tolist() == [1.0, 1.0]
    # amplitude of the seed's oscillation at Im(lambda_1), tracked period by period
    t, x = traj.times, traj.mz[:, 0]
    omega = LAMBDA1_N6.imag
    period = 2 * np.pi / omega
    starts = np.arange(5.0, 35.0 - period, period / 2)
    amps = []
    for a in starts:
        m = (t >= a) & (t < a + period)
        tt = t[m] - a
        basis = np.column_stack([np.ones_like(tt), tt, tt**2, np.cos(omega * t[m]), np.sin(omega * t[m])])
        c = np.linalg.lstsq(basis, x[m], rcond=None)[0]
        amps.append(np.hypot(c[3], c[4]))
    rate = np.polyfit(starts, np.log(amps), 1)[0]
    assert rate == pytest.approx(LAMBDA1_N6.real, rel=0.02)


def test_finite_size_trajectory_matches_eigen_decomposition():
    space = DickeSpace(2, 2)
    L = build_liouvillian(FIG1, space).toarray()
    traj = finite_size_trajectory(FIG1, space, IntegrationConfig(t_end=5.0, dt_out=0.5))
    rho0 = polarized_density(space)
    d = space.hilbert_dim
    zb = np.kron(np.eye(3), np.diag([1.0, 0.0, -1.0]))
    for k, t in enumerate(traj.times):
        rho = (scipy.linalg.expm(L * t) @ rho0).reshape(d, d, order="F")
        assert np.trace(zb @ rho).real == pytest.approx(traj.mz[k, 1], abs=1e-10)


def test_uncoupled_subthreshold_ensemble_relaxes():
    p = NetworkParams.from_omegas([1.5, 0.9])
    traj = finite_size_trajectory(p, DickeSpace(3, 3), IntegrationConfig(t_end=60.0, dt_out=0.05))
    zb = traj.mz[:, 1]
    late = zb[traj.times >= 45]
    assert 0.5 * np.ptp(late) < 1e-3
    assert 0.5 * np.ptp(zb[traj.times < 15]) > 0.1


def test_finite_size_trajectory_guards():
    with pytest.raises(ResourceError):
        finite_size_trajectory(FIG1, DickeSpace.symmetric(10), IntegrationConfig(t_end=1.0), max_dim=1000)
    with pytest.raises(StructuralError):
        finite_size_trajectory(FIG1, DickeSpace(1, 1), IntegrationConfig(t_end=1.0), initial=np.eye(3))


def test_coo_round_trip(tmp_path):
    L = build_liouvillian(FIG1.with_coupling("coherent", 0.3), DickeSpace(2, 3))
    path = tmp_path / "L.coo"
    save_coo(L, path)
    again = load_coo(path)
    assert again.shape == L.shape
    assert (again != L).nnz == 0
    save_coo(again, tmp_path / "L2.coo")
    assert (tmp_path / "L2.coo").read_bytes() == path.read_bytes()


@pytest.mark.parametrize(
    "text",
    [
        "",
        "# something else\n",
        "# timeseed-liouvillian-coo v9 shape 2 2 nnz 0\n",
        "# timeseed-liouvillian-coo v1 shape 2 2 nnz 1\n0 0 1.0\n",
        "# timeseed-liouvillian-coo v1 shape 2 2 nnz 2\n0 0 1.0 0.0\n",
        "# timeseed-liouvillian-coo v1 shape 2 2 nnz 1\n5 0 1.0 0.0\n",
    ],
)
def test_coo_rejects_malformed_files(tmp_path, text):
    path = tmp_path / "bad.coo"
    path.write_text(text)
    with pytest.raises(FormatError):
        load_coo(path)
