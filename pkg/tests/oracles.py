"""Reference implementations that share no code with the package.

Everything here is written from textbook definitions with plain numpy and
scipy: column-major vectorised Liouvillians, exact matrix exponentials and
closed-form two-level solutions.
"""

import numpy as np
from scipy.linalg import expm, sqrtm

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
P0 = np.array([[1, 0], [0, 0]], dtype=complex)
LOWER = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|
RAISE = LOWER.T.copy()


def kron(*ops):
    out = np.array([[1.0 + 0j]])
    for op in ops:
        out = np.kron(out, op)
    return out


def on_site(op, i, n):
    return kron(*[op if k == i else I2 for k in range(n)])


def hamiltonian_n2(family, theta):
    """Two-qubit Hamiltonians written out term by term."""
    if family == "rydberg":
        om, de, c = theta
        return om / 2 * (kron(SX, I2) + kron(I2, SX)) - de * (kron(SZ, I2) + kron(I2, SZ)) + c * kron(SZ, SZ)
    if family == "superconducting":
        h0, h1, z = theta
        eye = np.eye(4)
        return h0 / 2 * (eye - kron(SZ, I2)) + h1 / 2 * (eye - kron(I2, SZ)) + z / 2 * kron(SZ, SZ)
    if family == "xyz":
        jx, jy, jz, h0, h1 = theta
        return jx * kron(SX, SX) + jy * kron(SY, SY) + jz * kron(SZ, SZ) + h0 * kron(SX, I2) + h1 * kron(I2, SX)
    if family == "pxp":
        assert len(theta) == 0
        return np.zeros((4, 4), dtype=complex)
    raise ValueError(family)


def hamiltonian_pxp(theta, n):
    h = np.zeros((2**n, 2**n), dtype=complex)
    for k, i in enumerate(range(1, n - 1)):
        h += theta[k] * kron(*[P0 if s in (i - 1, i + 1) else SX if s == i else I2 for s in range(n)])
    return h


def jumps(noise, n):
    phase = [on_site(SZ, i, n) for i in range(n)]
    thermal = [on_site(LOWER, i, n) for i in range(n)] + [on_site(RAISE, i, n) for i in range(n)]
    return {"phase": phase, "thermal": thermal, "combined": phase + thermal}[noise]


def liouvillian(h, ops, rates):
    """Superoperator for column-stacked ``vec``: ``vec(A X B) = (B^T kron A) vec(X)``."""
    d = h.shape[0]
    eye = np.eye(d)
    sup = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for g, L in zip(rates, ops):
        ld = L.conj().T @ L
        sup += g * (np.kron(L.conj(), L) - 0.5 * np.kron(eye, ld) - 0.5 * np.kron(ld.T, eye))
    return sup


def vec(rho):
    return rho.reshape(-1, order="F")


def unvec(v, d):
    return v.reshape(d, d, order="F")


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def exact_states(sup, rho0, times):
    d = rho0.shape[0]
    return [unvec(expm(sup * t) @ vec(rho0), d) for t in times]


def dephasing_coherence(c0, gamma, t):
    """``rho_01(t)`` under ``L = Z`` with rate ``gamma``."""
    return c0 * np.exp(-2 * gamma * t)


def decay_population(p1, gamma, t):
    """Excited population under ``L = |0><1|``."""
    return p1 * np.exp(-gamma * t)


def qubit_fidelity(a, b):
    """Two-level closed form ``Tr(a b) + 2 sqrt(det a det b)``."""
    val = np.trace(a @ b).real + 2 * np.sqrt(max(np.linalg.det(a).real, 0) * max(np.linalg.det(b).real, 0))
    return float(val)


def uhlmann_fidelity(a, b):
    s = sqrtm(a)
    return float(np.real(np.trace(sqrtm(s @ b @ s))) ** 2)


def rotation(label):
    hd = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    sdg = np.diag([1, -1j])
    return {"Z": I2, "X": hd, "Y": hd @ sdg}[label]


def born(rho, basis):
    u = kron(*[rotation(c) for c in basis])
    return np.real(np.diag(u @ rho @ u.conj().T))


def product_state(tokens):
    """``["x+", "z-"]`` -> density matrix, from ``(I + s sigma) / 2`` per site."""
    mats = {"x": SX, "y": SY, "z": SZ}
    return kron(*[(I2 + (1 if t[1] == "+" else -1) * mats[t[0]]) / 2 for t in tokens])


def brute_force_nll(sup, rho0, times, records):
    """Sum of ``-log p`` record by record, one matrix exponential each."""
    d = rho0.shape[0]
    total = 0.0
    for t, basis, bits in records:
        rho = unvec(expm(sup * t) @ vec(rho0), d)
        p = born(rho, basis)[int(bits, 2)]
        total -= np.log(max(p, 1e-12))
    return total
