"""Hamiltonian and dissipator families, rate maps and the GKSL generator.

Hamiltonian coefficient order (``theta_H``)
    rydberg          Omega, delta, then one ``c_ij`` per interacting pair
    superconducting  h_0..h_{N-1}, then one ``zeta_ij`` per chain edge
    xyz              Jx_0..Jx_{N-2}, Jy_*, Jz_*, then h_0..h_{N-1}
    pxp              J_1..J_{N-2} (0-based centre site)

Jump operator order (``theta_L``)
    phase     Z_0..Z_{N-1}
    thermal   L-_0..L-_{N-1}, L+_0..L+_{N-1}
    combined  phase list followed by thermal list
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .spinops import embed_single_site, pauli_matrix

HAMILTONIAN_FAMILIES = ("rydberg", "superconducting", "xyz", "pxp")
DISSIPATOR_FAMILIES = ("phase", "thermal", "combined")
NOISE_RATIOS = (0.01, 0.1, 1.0, 10.0)

C6 = 1e6  # um^6, interaction strength in the normalised energy unit
LATTICE_SPACING = (9.0, 11.0)  # um
POSITION_JITTER = 0.05  # fraction of the lattice spacing
NEIGHBOUR_CUTOFF = np.sqrt(3.0) * 1.1  # in units of the ideal spacing

LOWERING = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1| = (X + iY)/2 when Z|0> = +|0>
RAISING = np.array([[0, 0], [1, 0]], dtype=complex)  # |1><0| = (X - iY)/2
PROJ0 = np.array([[1, 0], [0, 0]], dtype=complex)


# --------------------------------------------------------------------------
# model structure


def triangular_patch(n: int) -> np.ndarray:
    """Ideal positions (units of the lattice spacing) of a compact triangular patch."""
    rows = {1: [1], 2: [2], 3: [2, 1], 4: [2, 2], 5: [2, 3], 6: [3, 3]}.get(n)
    if rows is None:
        rows = [3] * (n // 3) + ([n % 3] if n % 3 else [])
    pts = []
    prev_len, prev_off = None, 0.0
    for r, length in enumerate(rows):
        off = -(length - 1) / 2
        if prev_len is not None and length == prev_len:
            off = prev_off + 0.5
        prev_len, prev_off = length, off
        pts.extend((off + j, r * np.sqrt(3) / 2) for j in range(length))
    return np.asarray(pts, dtype=float)


def neighbour_pairs(ideal_positions: np.ndarray) -> tuple:
    """Nearest and next-nearest pairs of an ideal lattice patch."""
    n = len(ideal_positions)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(ideal_positions[i] - ideal_positions[j]) <= NEIGHBOUR_CUTOFF:
                pairs.append((i, j))
    return tuple(pairs)


def chain_edges(n: int) -> tuple:
    return tuple((i, i + 1) for i in range(n - 1))


@dataclass(frozen=True)
class HamiltonianSpec:
    """Which Hamiltonian family, on how many qubits, with which couplings.

    ``pairs`` lists interacting atom pairs (rydberg) or chain edges
    (superconducting, xyz). ``positions`` holds realised atom positions in
    micrometres; it is only informational once the pair coefficients are set.
    """

    family: str
    n: int
    pairs: tuple = ()
    positions: Optional[tuple] = None

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in HAMILTONIAN_FAMILIES:
            raise ValueError(f"unknown Hamiltonian family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if self.n < 1:
            raise ValueError("need at least one qubit")
        if not self.pairs and fam != "pxp":
            default = neighbour_pairs(triangular_patch(self.n)) if fam == "rydberg" else chain_edges(self.n)
            object.__setattr__(self, "pairs", default)
        object.__setattr__(self, "pairs", tuple(tuple(int(x) for x in p) for p in self.pairs))
        for i, j in self.pairs:
            if not (0 <= i < self.n and 0 <= j < self.n and i != j):
                raise ValueError(f"invalid pair {(i, j)} for {self.n} qubits")
        if self.positions is not None:
            pos = tuple(tuple(float(c) for c in p) for p in self.positions)
            if len(pos) != self.n:
                raise ValueError("one position per atom required")
            object.__setattr__(self, "positions", pos)

    @property
    def n_params(self) -> int:
        n, fam = self.n, self.family
        if fam == "rydberg":
            return 2 + len(self.pairs)
        if fam == "superconducting":
            return n + len(self.pairs)
        if fam == "xyz":
            return 3 * len(self.pairs) + n
        return max(n - 2, 0)

    def parameter_names(self) -> list:
        fam = self.family
        if fam == "rydberg":
            return ["Omega", "delta"] + [f"c_{i}_{j}" for i, j in self.pairs]
        if fam == "superconducting":
            return [f"h_{i}" for i in range(self.n)] + [f"zeta_{i}_{j}" for i, j in self.pairs]
        if fam == "xyz":
            return [f"J{a}_{i}_{j}" for a in "xyz" for i, j in self.pairs] + [f"h_{i}" for i in range(self.n)]
        return [f"J_{i}" for i in range(1, self.n - 1)]

    def to_dict(self) -> dict:
        d = {"family": self.family, "N": self.n}
        if self.family == "rydberg":
            d["geometry"] = {
                "positions": [list(p) for p in self.positions] if self.positions else [],
                "pairs": [list(p) for p in self.pairs],
            }
        elif self.family != "pxp":
            d["edges"] = [list(p) for p in self.pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HamiltonianSpec":
        fam = d["family"]
        if fam.lower() == "rydberg":
            geo = d.get("geometry", {})
            pos = geo.get("positions") or None
            return cls(fam, int(d["N"]), tuple(map(tuple, geo.get("pairs", []))), pos)
        return cls(fam, int(d["N"]), tuple(map(tuple, d.get("edges", []))))


@dataclass(frozen=True)
class DissipatorSpec:
    family: str
    n: int

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in DISSIPATOR_FAMILIES:
            raise ValueError(f"unknown dissipator family {self.family!r}")
        object.__setattr__(self, "family", fam)

    @property
    def n_params(self) -> int:
        return {"phase": 1, "thermal": 2, "combined": 3}[self.family] * self.n

    def operator_names(self) -> list:
        ph = [f"Z_{i}" for i in range(self.n)]
        th = [f"Lm_{i}" for i in range(self.n)] + [f"Lp_{i}" for i in range(self.n)]
        return {"phase": ph, "thermal": th, "combined": ph + th}[self.family]


@dataclass(frozen=True)
class ModelSpec:
    """White-box ansatz: fixes which operators carry learnable coefficients."""

    hamiltonian: HamiltonianSpec
    dissipator: DissipatorSpec

    def __post_init__(self):
        if self.hamiltonian.n != self.dissipator.n:
            raise ValueError("Hamiltonian and dissipator act on different qubit counts")

    @classmethod
    def create(cls, family: str, noise: str, n: int, **kw) -> "ModelSpec":
        return cls(HamiltonianSpec(family, n, **kw), DissipatorSpec(noise, n))

    @property
    def n(self) -> int:
        return self.hamiltonian.n

    @property
    def dim(self) -> int:
        return 2**self.n

    @property
    def n_h(self) -> int:
        return self.hamiltonian.n_params

    @property
    def n_l(self) -> int:
        return self.dissipator.n_params

    def to_dict(self) -> dict:
        d = self.hamiltonian.to_dict()
        d["dissipator"] = self.dissipator.family
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        h = HamiltonianSpec.from_dict(d)
        return cls(h, DissipatorSpec(d["dissipator"], h.n))

    @cached_property
    def hamiltonian_terms(self) -> np.ndarray:
        return hamiltonian_terms(self.hamiltonian)

    @cached_property
    def jump_operators(self) -> np.ndarray:
        return np.asarray(build_jump_operators(self.dissipator))

    @cached_property
    def superop_basis(self) -> np.ndarray:
        """Row-major Liouvillians of every term, ``(n_h + n_l, d^2, d^2)``."""
        mats = [_commutator_superop(t) for t in self.hamiltonian_terms]
        mats += [_dissipator_superop(L) for L in self.jump_operators]
        return np.asarray(mats, dtype=complex).reshape(-1, self.dim**2, self.dim**2)


def hamiltonian_terms(spec: HamiltonianSpec) -> np.ndarray:
    """Operators ``T_k`` with ``H = sum_k theta_H[k] T_k``; shape ``(n_params, d, d)``."""
    n, fam = spec.n, spec.family
    d = 2**n
    X, Y, Z, I2 = (pauli_matrix(c) for c in "XYZI")

    def site(op, i):
        return embed_single_site(op, i, n)

    terms = []
    if fam == "rydberg":
        terms.append(0.5 * sum(site(X, i) for i in range(n)))
        terms.append(-sum(site(Z, i) for i in range(n)))
        terms += [site(Z, i) @ site(Z, j) for i, j in spec.pairs]
    elif fam == "superconducting":
        terms += [0.5 * (np.eye(d) - site(Z, i)) for i in range(n)]
        terms += [0.5 * site(Z, i) @ site(Z, j) for i, j in spec.pairs]
    elif fam == "xyz":
        for P in (X, Y, Z):
            terms += [site(P, i) @ site(P, j) for i, j in spec.pairs]
        terms += [site(X, i) for i in range(n)]
    else:
        terms += [site(PROJ0, i - 1) @ site(X, i) @ site(PROJ0, i + 1) for i in range(1, n - 1)]
    if not terms:
        return np.zeros((0, d, d), dtype=complex)
    return np.asarray(terms, dtype=complex)


def build_hamiltonian(spec: HamiltonianSpec, theta_h) -> np.ndarray:
    theta_h = np.asarray(theta_h, dtype=float)
    if theta_h.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} Hamiltonian coefficients, got {theta_h.shape}")
    terms = hamiltonian_terms(spec)
    d = 2**spec.n
    if len(terms) == 0:
        return np.zeros((d, d), dtype=complex)
    return np.tensordot(theta_h, terms, axes=1)


def build_jump_operators(spec: DissipatorSpec) -> list:
    n = spec.n
    phase = [embed_single_site(pauli_matrix("Z"), i, n) for i in range(n)]
    thermal = [embed_single_site(LOWERING, i, n) for i in range(n)]
    thermal += [embed_single_site(RAISING, i, n) for i in range(n)]
    return {"phase": phase, "thermal": thermal, "combined": phase + thermal}[spec.family]


# --------------------------------------------------------------------------
# rate maps


def rates_from_raw(theta_l) -> np.ndarray:
    """Softplus ``log(1 + e^theta)``, stable for large ``|theta|``."""
    x = np.asarray(theta_l, dtype=float)
    return np.logaddexp(0.0, x)


def rates_derivative(theta_l) -> np.ndarray:
    """d softplus / d theta, i.e. the logistic sigmoid."""
    x = np.asarray(theta_l, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def raw_from_rates(gamma) -> np.ndarray:
    """Inverse softplus ``log(e^gamma - 1)``."""
    g = np.asarray(gamma, dtype=float)
    if np.any(~(g > 0)):
        raise ValueError("rates must be strictly positive")
    return g + np.log(-np.expm1(-g))


# --------------------------------------------------------------------------
# generator evaluation


def apply_physical_generator(spec: ModelSpec, theta_h, theta_l, rho: np.ndarray) -> np.ndarray:
    """``-i[H, rho] + sum_a gamma_a (L rho L^H - {L^H L, rho}/2)``."""
    if rho.shape != (spec.dim, spec.dim):
        raise ValueError(f"state has shape {rho.shape}, model needs {(spec.dim, spec.dim)}")
    h = build_hamiltonian(spec.hamiltonian, theta_h)
    gam = rates_from_raw(theta_l)
    if gam.shape != (spec.n_l,):
        raise ValueError(f"expected {spec.n_l} dissipative parameters, got {gam.shape}")
    out = -1j * (h @ rho - rho @ h)
    for g, L in zip(gam, spec.jump_operators):
        ldl = L.conj().T @ L
        out += g * (L @ rho @ L.conj().T - 0.5 * (ldl @ rho + rho @ ldl))
    return out


def _commutator_superop(a: np.ndarray) -> np.ndarray:
    """Row-major vectorisation of ``rho -> -i[a, rho]``."""
    eye = np.eye(a.shape[0])
    return -1j * (np.kron(a, eye) - np.kron(eye, a.T))


def _dissipator_superop(L: np.ndarray) -> np.ndarray:
    eye = np.eye(L.shape[0])
    ldl = L.conj().T @ L
    return np.kron(L, L.conj()) - 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T))


class LindbladField:
    """Physical GKSL vector field on row-major flattened density matrices.

    For small registers the generator is assembled as a dense ``d^2 x d^2``
    Liouvillian; above ``superop_max_qubits`` the matrix form is applied
    directly. Both paths expose the same reverse-mode interface used by the
    integrator.
    """

    superop_max_qubits = 4

    def __init__(self, spec: ModelSpec, theta_h, theta_l, dense: Optional[bool] = None):
        self.spec = spec
        self.theta_h = np.asarray(theta_h, dtype=float)
        self.theta_l = np.asarray(theta_l, dtype=float)
        if self.theta_h.shape != (spec.n_h,) or self.theta_l.shape != (spec.n_l,):
            raise ValueError("parameter lengths do not match the model")
        self.gamma = rates_from_raw(self.theta_l)
        self.dgamma = rates_derivative(self.theta_l)
        self.d = spec.dim
        self.dense = spec.n <= self.superop_max_qubits if dense is None else dense
        self.n_params = spec.n_h + spec.n_l
        self._h_terms = spec.hamiltonian_terms
        self._jumps = spec.jump_operators
        self._h = (np.tensordot(self.theta_h, self._h_terms, axes=1) if spec.n_h
                   else np.zeros((self.d, self.d), dtype=complex))
        self._ldl = np.einsum("aji,ajk->aik", self._jumps.conj(), self._jumps)
        if self.dense:
            basis = spec.superop_basis
            self._basis = basis
            coeffs = np.concatenate([self.theta_h, self.gamma])
            self.liouvillian = np.tensordot(coeffs, basis, axes=1)
            self._liouvillian_h = self.liouvillian.conj().T.copy()

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self.dense:
            return self.liouvillian @ y
        return self._apply(y.reshape(self.d, self.d)).ravel()

    def _apply(self, rho):
        h = self._h
        out = -1j * (h @ rho - rho @ h)
        if len(self._jumps):
            lr = self._jumps @ rho @ self._jumps.conj().transpose(0, 2, 1)
            anti = self._ldl @ rho + rho @ self._ldl
            out = out + np.tensordot(self.gamma, lr - 0.5 * anti, axes=1)
        return out

    def _apply_adjoint(self, c):
        h = self._h
        out = 1j * (h @ c - c @ h)
        if len(self._jumps):
            lcl = self._jumps.conj().transpose(0, 2, 1) @ c @ self._jumps
            anti = self._ldl @ c + c @ self._ldl
            out = out + np.tensordot(self.gamma, lcl - 0.5 * anti, axes=1)
        return out

    # reverse mode --------------------------------------------------------

    def new_accumulator(self):
        if self.dense:
            return np.zeros((self.d**2, self.d**2), dtype=complex)
        return {"h": np.zeros((self.d, self.d), dtype=complex), "g": np.zeros(self.spec.n_l)}

    def vjp(self, y: np.ndarray, ct: np.ndarray, acc) -> np.ndarray:
        """Return ``J^H ct`` and add the parameter cotangent into ``acc``."""
        if self.dense:
            acc += np.outer(ct.conj(), y)
            return self._liouvillian_h @ ct
        rho = y.reshape(self.d, self.d)
        c = ct.reshape(self.d, self.d)
        acc["h"] += rho @ c.conj().T - c.conj().T @ rho
        if len(self._jumps):
            lr = self._jumps @ rho @ self._jumps.conj().transpose(0, 2, 1)
            anti = self._ldl @ rho + rho @ self._ldl
            diss = lr - 0.5 * anti
            acc["g"] += np.einsum("ij,aij->a", c.conj(), diss).real
        return self._apply_adjoint(c).ravel()

    def finalize(self, acc) -> np.ndarray:
        """Flat real gradient ordered ``(theta_H, theta_L)``."""
        nh = self.spec.n_h
        if self.dense:
            g = np.einsum("kij,ij->k", self._basis, acc).real
            out = g.copy()
        else:
            out = np.empty(self.n_params)
            out[:nh] = (-1j * np.einsum("kab,ba->k", self._h_terms, acc["h"])).real if nh else []
            out[nh:] = acc["g"]
        out[nh:] *= self.dgamma
        return out


# --------------------------------------------------------------------------
# ground-truth sampling


@dataclass(frozen=True)
class ExperimentConfig:
    family: str
    noise: str
    n: int
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.ratio > 0:
            raise ValueError("noise-to-unitary ratio must be positive")


@dataclass
class TrueParams:
    """Ground truth: Hamiltonian coefficients and physical rates."""

    theta_h: np.ndarray
    gamma: np.ndarray

    @property
    def theta_l(self) -> np.ndarray:
        return raw_from_rates(self.gamma)

    def to_dict(self) -> dict:
        return {"theta_H": [float(x) for x in self.theta_h], "gamma": [float(x) for x in self.gamma]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrueParams":
        return cls(np.asarray(d["theta_H"], dtype=float), np.asarray(d["gamma"], dtype=float))


def rescale_noise_to_ratio(theta_h, gamma, ratio: float) -> np.ndarray:
    """Scale ``gamma`` so that ``|gamma|_1 / |theta_H|_1 == ratio``."""
    if not ratio > 0:
        raise ValueError("noise-to-unitary ratio must be positive")
    hn = np.abs(np.asarray(theta_h, dtype=float)).sum()
    if hn <= 0:
        raise ValueError("Hamiltonian coefficients have zero L1 norm")
    gamma = np.asarray(gamma, dtype=float)
    return gamma * (ratio * hn / np.abs(gamma).sum())


def sample_rydberg_geometry(n: int, rng: np.random.Generator):
    """Jittered triangular patch; returns positions (um) and pair coefficients."""
    ideal = triangular_patch(n)
    pairs = neighbour_pairs(ideal)
    a = rng.uniform(*LATTICE_SPACING)
    pos = ideal * a + rng.uniform(-POSITION_JITTER * a, POSITION_JITTER * a, size=ideal.shape)
    coeffs = np.array([C6 / np.linalg.norm(pos[i] - pos[j]) ** 6 for i, j in pairs])
    return pos, pairs, coeffs


def sample_true_params(config: ExperimentConfig, rng: np.random.Generator):
    """Draw a ground-truth generator for ``config``.

    Returns ``(model, truth)`` where ``model`` carries any realised geometry.
    """
    fam, n = config.family.lower(), config.n
    if fam == "rydberg":
        pos, pairs, coeffs = sample_rydberg_geometry(n, rng)
        omega = rng.uniform(0.0, 1.0)
        delta = rng.uniform(-4.0, 4.0)
        hspec = HamiltonianSpec("rydberg", n, pairs, tuple(map(tuple, pos)))
        theta_h = np.concatenate([[omega, delta], coeffs])
    elif fam == "superconducting":
        hspec = HamiltonianSpec(fam, n)
        # h/2pi ~ N(0, 10) kHz, zeta/2pi ~ N(-30, 10) kHz, then / 100
        h = 2 * np.pi * rng.normal(0.0, 10.0, size=n) / 100
        zeta = 2 * np.pi * rng.normal(-30.0, 10.0, size=len(hspec.pairs)) / 100
        theta_h = np.concatenate([h, zeta])
    else:
        hspec = HamiltonianSpec(fam, n)
        theta_h = rng.uniform(-1.0, 1.0, size=hspec.n_params)
    model = ModelSpec(hspec, DissipatorSpec(config.noise, n))
    gamma = rng.uniform(0.2, 1.0, size=model.n_l)
    gamma = rescale_noise_to_ratio(theta_h, gamma, config.ratio)
    return model, TrueParams(theta_h, gamma)
