"""Pauli algebra, product states and the trace/Hermiticity projection.

Conventions used everywhere in the package:

* site 0 is the leftmost Kronecker factor, i.e. the most significant bit
  of a computational-basis index;
* ``Z|0> = +|0>``;
* density matrices are dense ``complex128`` arrays of shape ``(2**n, 2**n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, reduce
from typing import Sequence

import numpy as np

MAX_QUBITS = 6
PAULI_LABELS = "IXYZ"
BASIS_LABELS = "XYZ"

_PAULI = {
    "I": np.array([[1, 0], [0, 1]], dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}
for _m in _PAULI.values():
    _m.setflags(write=False)

_HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_S_DAG = np.array([[1, 0], [0, -1j]], dtype=complex)
# Per-site rotations taking the measured axis onto Z.
_ROTATION = {
    "Z": np.eye(2, dtype=complex),
    "X": _HADAMARD,
    "Y": _HADAMARD @ _S_DAG,
}

TRACE_EPS = 1e-12


class PhysicalityError(RuntimeError):
    """Raised when a state can no longer be normalised (diverged trajectory)."""


def pauli_matrix(label: str) -> np.ndarray:
    """Return the 2x2 Pauli matrix for ``label`` in ``{I, X, Y, Z}``."""
    try:
        return _PAULI[label].copy()
    except KeyError:
        raise ValueError(f"unknown Pauli label {label!r}") from None


@dataclass(frozen=True)
class PauliString:
    """A tensor product of single-site Pauli labels, site 0 first."""

    labels: str

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("Pauli string must act on at least one site")
        bad = set(self.labels) - set(PAULI_LABELS)
        if bad:
            raise ValueError(f"invalid Pauli labels {sorted(bad)} in {self.labels!r}")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def is_basis(self) -> bool:
        """True when the string is a valid measurement basis (no identity)."""
        return "I" not in self.labels

    def __str__(self) -> str:
        return self.labels

    @classmethod
    def parse(cls, text: str) -> "PauliString":
        return cls(text.strip().upper())


def _as_labels(ps) -> str:
    return ps.labels if isinstance(ps, PauliString) else PauliString(str(ps)).labels


def _check_size(n: int, max_qubits: int = MAX_QUBITS) -> None:
    if n > max_qubits:
        raise ValueError(f"{n} qubits exceeds the configured maximum of {max_qubits}")


def kron_all(factors: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(np.kron, factors)


def string_operator(ps, max_qubits: int = MAX_QUBITS) -> np.ndarray:
    """Dense matrix of a Pauli string (Kronecker product, site 0 leftmost)."""
    labels = _as_labels(ps)
    _check_size(len(labels), max_qubits)
    return kron_all([_PAULI[c] for c in labels])


def embed_single_site(op: np.ndarray, site: int, n: int) -> np.ndarray:
    """Place a 2x2 operator at ``site`` of an ``n``-qubit register."""
    if not 0 <= site < n:
        raise ValueError(f"site {site} out of range for {n} qubits")
    _check_size(n)
    op = np.asarray(op, dtype=complex)
    left = np.eye(2**site, dtype=complex)
    right = np.eye(2 ** (n - site - 1), dtype=complex)
    return np.kron(np.kron(left, op), right)


@lru_cache(maxsize=8)
def _pauli_basis_cached(n: int) -> np.ndarray:
    mats = np.empty((4**n, 2**n, 2**n), dtype=complex)
    for j in range(4**n):
        mats[j] = string_operator(pauli_label(j, n))
    mats.setflags(write=False)
    return mats


def pauli_label(index: int, n: int) -> str:
    """Label of the ``index``-th Pauli string in base-4 order (I=0, X=1, Y=2, Z=3).

    Site 0 is the most significant base-4 digit, so index 0 is ``I...I``.
    """
    digits = []
    for _ in range(n):
        index, r = divmod(index, 4)
        digits.append(PAULI_LABELS[r])
    return "".join(reversed(digits))


def pauli_basis(n: int) -> np.ndarray:
    """All ``4**n`` Pauli strings as a read-only ``(4**n, 2**n, 2**n)`` stack."""
    _check_size(n)
    return _pauli_basis_cached(n)


@dataclass(frozen=True)
class InitialStateSpec:
    """Per-site Pauli eigenstate choice: ``axes[i]`` in XYZ, ``signs[i]`` in +-1."""

    axes: str
    signs: tuple

    def __post_init__(self):
        if len(self.axes) != len(self.signs) or not self.axes:
            raise ValueError("axes and signs must be non-empty and of equal length")
        if set(self.axes) - set(BASIS_LABELS):
            raise ValueError(f"axes must be drawn from XYZ, got {self.axes!r}")
        if any(s not in (1, -1) for s in self.signs):
            raise ValueError("signs must be +1 or -1")
        object.__setattr__(self, "signs", tuple(int(s) for s in self.signs))

    @property
    def n(self) -> int:
        return len(self.axes)

    def __str__(self) -> str:
        return ",".join(f"{a.lower()}{'+' if s > 0 else '-'}" for a, s in zip(self.axes, self.signs))

    @classmethod
    def parse(cls, text: str) -> "InitialStateSpec":
        axes, signs = [], []
        for tok in text.split(","):
            tok = tok.strip().lower()
            if len(tok) != 2 or tok[0] not in "xyz" or tok[1] not in "+-":
                raise ValueError(f"bad initial-state token {tok!r}")
            axes.append(tok[0].upper())
            signs.append(1 if tok[1] == "+" else -1)
        return cls("".join(axes), tuple(signs))


def product_eigenstate(spec: InitialStateSpec) -> np.ndarray:
    """Density matrix of the product state with factors ``(I + s*sigma_axis)/2``."""
    _check_size(spec.n)
    factors = [(_PAULI["I"] + s * _PAULI[a]) / 2 for a, s in zip(spec.axes, spec.signs)]
    return kron_all(factors)


def project_physical(m: np.ndarray) -> np.ndarray:
    """Normalise by the trace, then take the Hermitian part.

    Positivity is deliberately not enforced. A trace smaller than
    ``TRACE_EPS`` in magnitude means the trajectory has diverged.
    """
    tr = np.trace(m)
    if not np.isfinite(tr) or abs(tr) <= TRACE_EPS:
        raise PhysicalityError(f"cannot normalise state with trace {tr!r}")
    a = m / tr
    return 0.5 * (a + a.conj().T)


def project_physical_vjp(m: np.ndarray, ct: np.ndarray) -> np.ndarray:
    """Pull back the cotangent ``ct`` of ``project_physical(m)`` onto ``m``.

    Cotangents follow the convention ``dL = Re tr(ct^H dX)``.
    """
    tr = np.trace(m)
    ct_a = 0.5 * (ct + ct.conj().T)
    out = ct_a / np.conj(tr)
    c = -np.vdot(ct_a, m) / tr**2  # vdot conjugates its first argument: tr(ct_a^H m)
    out = out + np.conj(c) * np.eye(m.shape[0])
    return out


def basis_rotation(basis) -> np.ndarray:
    """Unitary mapping measurement in ``basis`` onto the computational basis.

    Z -> I, X -> H, Y -> H S^dagger per site.
    """
    labels = _as_labels(basis)
    if "I" in labels:
        raise ValueError(f"measurement basis {labels!r} contains an identity label")
    _check_size(len(labels))
    return kron_all([_ROTATION[c] for c in labels])


def site_rotation(label: str) -> np.ndarray:
    """Single-site factor of :func:`basis_rotation`."""
    return _ROTATION[label].copy()


def measurement_vectors(bases: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Product vectors ``u = U^H |b>`` for a batch of records.

    ``bases`` holds integer codes (0=X, 1=Y, 2=Z) of shape ``(r, n)`` and
    ``bits`` the outcomes of the same shape. The Born probability of a record
    is then ``u^H rho u``.
    """
    bases = np.asarray(bases)
    bits = np.asarray(bits)
    rot = np.stack([_ROTATION[c] for c in BASIS_LABELS])  # (3, 2, 2)
    # row b of U, conjugated, is U^H |b>
    site_vecs = rot[bases, bits, :].conj()  # (r, n, 2)
    out = site_vecs[:, 0, :]
    for s in range(1, bases.shape[1]):
        out = (out[:, :, None] * site_vecs[:, s, None, :]).reshape(out.shape[0], -1)
    return out


def is_hermitian(m: np.ndarray, tol: float = 1e-10) -> bool:
    return float(np.max(np.abs(m - m.conj().T))) <= tol


def min_eigenvalue(rho: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])


def random_density_matrix(n: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random mixed state ``G G^H / tr`` with a complex Ginibre ``G``."""
    d = 2**n
    k = d if rank is None else rank
    g = rng.normal(size=(d, k)) + 1j * rng.normal(size=(d, k))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real
