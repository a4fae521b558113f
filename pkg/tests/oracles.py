"""Independent reference implementations used only by the tests.

Everything here is written from the equations directly, without touching
the package's compiled kernels or sparse assembly, so agreement between the
two is meaningful.
"""

import numpy as np
from scipy.integrate import solve_ivp


def mean_field_rhs(y, omegas, kappas, strength, kind):
    """Element-wise transcription of the mean-field equations (loops over beta)."""
    n = len(omegas)
    m = np.asarray(y, dtype=float).reshape(n, 3)
    out = np.zeros_like(m)
    c = strength / n
    for a in range(n):
        mx, my, mz = m[a]
        sum_x = sum(m[b, 0] for b in range(n) if b != a)
        sum_y = sum(m[b, 1] for b in range(n) if b != a)
        if kind == "dissipative":
            loc = kappas[a] + c
            out[a, 0] = loc * mx * mz + c * mz * sum_x
            out[a, 1] = -omegas[a] * mz + loc * my * mz + c * mz * sum_y
            out[a, 2] = omegas[a] * my - loc * (mx**2 + my**2) - c * (mx * sum_x + my * sum_y)
        else:
            k = kappas[a]
            out[a, 0] = k * mx * mz + c * mz * sum_y
            out[a, 1] = -omegas[a] * mz + k * my * mz - c * mz * sum_x
            out[a, 2] = omegas[a] * my - k * (mx**2 + my**2) + c * (my * sum_x - mx * sum_y)
    return out.reshape(-1)


def reference_trajectory(params, initial, t_end, dt_out, rtol=1e-12, atol=1e-13):
    """scipy DOP853 solution sampled on the same grid as the package integrator."""
    kind = params.kind.value
    times = np.arange(int(round(t_end / dt_out)) + 1) * dt_out
    sol = solve_ivp(
        lambda t, y: mean_field_rhs(y, params.omegas, params.kappas, params.strength, kind),
        (0.0, times[-1]),
        np.asarray(initial, dtype=float).reshape(-1),
        method="DOP853",
        t_eval=times,
        rtol=rtol,
        atol=atol,
    )
    assert sol.success
    return times, sol.y.T.reshape(len(times), params.n, 3)


def spin_matrices(n_atoms):
    """Dense angular-momentum matrices for spin S = n_atoms/2, basis m = S, S-1, ..., -S."""
    s = n_atoms / 2
    m = s - np.arange(n_atoms + 1)
    sp = np.zeros((n_atoms + 1, n_atoms + 1))
    for i in range(1, n_atoms + 1):
        sp[i - 1, i] = np.sqrt(s * (s + 1) - m[i] * (m[i] + 1))
    sm = sp.T.copy()
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    sz = np.diag(m)
    return {"x": sx, "y": sy, "z": sz, "+": sp, "-": sm}


def _lindblad_action(rho, H, jumps):
    out = -1j * (H @ rho - rho @ H)
    for rate, c in jumps:
        cd = c.conj().T
        out += rate * (c @ rho @ cd - 0.5 * (cd @ c @ rho + rho @ cd @ c))
    return out


def two_ensemble_generator(omega_a, omega_b, kappa_a, kappa_b, n_a, n_b, strength, kind):
    """Dense Liouvillian built column by column from its action on basis matrices.

    Column ``j`` is vec(L(E_j)) with column-stacking vec, so no Kronecker
    identities are involved.
    """
    A, B = spin_matrices(n_a), spin_matrices(n_b)
    ia, ib = np.eye(n_a + 1), np.eye(n_b + 1)
    op_a = {k: np.kron(v, ib) for k, v in A.items()}
    op_b = {k: np.kron(ia, v) for k, v in B.items()}
    s_a, s_b = n_a / 2, n_b / 2
    H = omega_a * op_a["x"] + omega_b * op_b["x"]
    jumps = [(kappa_a / s_a, op_a["-"]), (kappa_b / s_b, op_b["-"])]
    s_tot = s_a + s_b
    if kind == "dissipative":
        jumps.append((strength / s_tot, op_a["-"] + op_b["-"]))
    else:
        H = H + strength / (2 * s_tot) * (op_a["+"] @ op_b["-"] + op_b["+"] @ op_a["-"])
    d = H.shape[0]
    L = np.zeros((d * d, d * d), dtype=complex)
    for j in range(d * d):
        E = np.zeros((d, d), dtype=complex)
        E[j % d, j // d] = 1.0  # column-stacking: vec index j -> (row j % d, col j // d)
        L[:, j] = _lindblad_action(E, H, jumps).reshape(-1, order="F")
    return L


def single_ensemble_generator(omega, kappa, n_atoms):
    S = spin_matrices(n_atoms)
    jumps = [(kappa / (n_atoms / 2), S["-"])]
    d = n_atoms + 1
    L = np.zeros((d * d, d * d), dtype=complex)
    for j in range(d * d):
        E = np.zeros((d, d), dtype=complex)
        E[j % d, j // d] = 1.0
        L[:, j] = _lindblad_action(E, omega * S["x"], jumps).reshape(-1, order="F")
    return L


def zero_crossing_frequency(signal, dt):
    """Angular frequency from upward mean crossings (linear interpolation)."""
    x = np.asarray(signal) - np.mean(signal)
    idx = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    t = (idx + (-x[idx]) / (x[idx + 1] - x[idx])) * dt
    return 2 * np.pi / np.mean(np.diff(t))
