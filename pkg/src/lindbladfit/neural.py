"""Neural correction to the generator.

The correction is a one-hidden-layer MLP acting on the real Pauli
coordinates of the state. Its output is read back as a real combination of
Pauli strings with the identity coefficient removed, so the correction is
Hermitian and traceless by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .generators import LindbladField, ModelSpec, apply_physical_generator
from .spinops import pauli_basis

SOFTPLUS_SCALE = 5.0


def to_pauli_coords(rho: np.ndarray) -> np.ndarray:
    """``coeffs[j] = Tr(P_j rho) / 2**n`` in base-4 Pauli order."""
    d = rho.shape[0]
    n = int(round(np.log2(d)))
    return np.einsum("jab,ba->j", pauli_basis(n), rho).real / d


def from_pauli_coords(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    n = int(round(np.log(coords.size) / np.log(4)))
    if 4**n != coords.size:
        raise ValueError(f"coordinate vector of length {coords.size} is not a power of 4")
    return np.tensordot(coords, pauli_basis(n), axes=1)


def scaled_softplus(x):
    """``log(1 + exp(5x)) / 5``."""
    return np.logaddexp(0.0, SOFTPLUS_SCALE * np.asarray(x, dtype=float)) / SOFTPLUS_SCALE


def _scaled_softplus_grad(x):
    z = SOFTPLUS_SCALE * x
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass
class MlpParams:
    """Weights ``w1 (h, d_in)``, ``b1 (h,)``, ``w2 (d_out, h)``, ``b2 (d_out,)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        h, d_in = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape[1] != h or self.b2.shape != (self.w2.shape[0],):
            raise ValueError("inconsistent MLP shapes")

    @property
    def widths(self) -> list:
        return [self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]]

    @property
    def size(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    @classmethod
    def unflatten(cls, flat, widths) -> "MlpParams":
        d_in, h, d_out = widths
        flat = np.asarray(flat, dtype=float)
        sizes = [h * d_in, h, d_out * h, d_out]
        if flat.size != sum(sizes):
            raise ValueError("flat vector does not match widths")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(h, d_in), parts[1].copy(), parts[2].reshape(d_out, h), parts[3].copy())

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, hidden: Optional[int] = None) -> "MlpParams":
        """Uniform ``1/sqrt(fan_in)`` hidden layer; zero output layer."""
        d = 4**n
        h = d if hidden is None else hidden
        bound = 1.0 / np.sqrt(d)
        return cls(rng.uniform(-bound, bound, size=(h, d)), rng.uniform(-bound, bound, size=h),
                   np.zeros((d, h)), np.zeros(d))

    def to_dict(self) -> dict:
        return {"widths": self.widths,
                "layers": [{"w": self.w1.ravel().tolist(), "b": self.b1.tolist()},
                           {"w": self.w2.ravel().tolist(), "b": self.b2.tolist()}]}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        d_in, h, d_out = d["widths"]
        l1, l2 = d["layers"]
        return cls(np.asarray(l1["w"], dtype=float).reshape(h, d_in), np.asarray(l1["b"], dtype=float),
                   np.asarray(l2["w"], dtype=float).reshape(d_out, h), np.asarray(l2["b"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def mlp_forward(phi: MlpParams, x: np.ndarray) -> np.ndarray:
    return phi.w2 @ scaled_softplus(phi.w1 @ x + phi.b1) + phi.b2


def neural_field(phi: MlpParams, rho: np.ndarray) -> np.ndarray:
    """Hermitian, traceless correction ``from_coords(MLP(to_coords(rho)))``."""
    z = mlp_forward(phi, to_pauli_coords(rho))
    z[0] = 0.0
    return from_pauli_coords(z)


def l2_penalty(phi: Optional[MlpParams], lam: float) -> float:
    if lam < 0:
        raise ValueError("regularisation strength must be non-negative")
    if phi is None or lam == 0:
        return 0.0
    return float(lam * np.sum(phi.flatten() ** 2))


def combined_field(spec: ModelSpec, theta_h, theta_l, phi: Optional[MlpParams], nde_enabled: bool,
                   rho: np.ndarray) -> np.ndarray:
    out = apply_physical_generator(spec, theta_h, theta_l, rho)
    if nde_enabled and phi is not None:
        out = out + neural_field(phi, rho)
    return out


class NeuralField:
    """Vector field of the neural correction on flattened states, with VJP."""

    def __init__(self, phi: MlpParams, n: int):
        self.phi = phi
        self.n = n
        d = 2**n
        self.d = d
        paulis = pauli_basis(n).reshape(4**n, d * d)
        # coords = Re(paulis_T_conj @ y) / d, since Tr(P rho) = sum_ab P_ba rho_ab
        self._to = paulis.reshape(4**n, d, d).transpose(0, 2, 1).reshape(4**n, d * d) / d
        self._from = paulis.T.copy()
        self._from_nonid = self._from[:, 1:].copy()
        self.n_params = phi.size

    def _forward(self, y):
        x = (self._to @ y).real
        pre = self.phi.w1 @ x + self.phi.b1
        return x, pre

    def __call__(self, y):
        x, pre = self._forward(y)
        z = self.phi.w2[1:] @ scaled_softplus(pre) + self.phi.b2[1:]
        return self._from_nonid @ z

    def new_accumulator(self):
        return np.zeros(self.n_params)

    def vjp(self, y, ct, acc):
        x, pre = self._forward(y)
        act = scaled_softplus(pre)
        zbar = (self._from_nonid.conj().T @ ct).real  # real coefficients
        w2 = self.phi.w2
        h, d_in = self.phi.w1.shape
        d_out = w2.shape[0]
        gw2 = np.zeros_like(w2)
        gw2[1:] = np.outer(zbar, act)
        gb2 = np.zeros(d_out)
        gb2[1:] = zbar
        abar = w2[1:].T @ zbar
        prebar = abar * _scaled_softplus_grad(pre)
        gw1 = np.outer(prebar, x)
        xbar = self.phi.w1.T @ prebar
        acc += np.concatenate([gw1.ravel(), prebar, gw2.ravel(), gb2])
        return self._to.conj().T @ xbar

    def finalize(self, acc):
        return acc.copy()


class CombinedField:
    """Physical generator plus an optional neural correction.

    Gradients are ordered ``(theta_H, theta_L, phi)``; with the correction
    disabled the ``phi`` block is absent from both passes.
    """

    def __init__(self, spec: ModelSpec, theta_h, theta_l, phi: Optional[MlpParams] = None,
                 nde_enabled: bool = False, dense: Optional[bool] = None):
        self.physical = LindbladField(spec, theta_h, theta_l, dense=dense)
        self.neural = NeuralField(phi, spec.n) if (nde_enabled and phi is not None) else None
        self.n_params = self.physical.n_params + (self.neural.n_params if self.neural else 0)

    def __call__(self, y):
        out = self.physical(y)
        if self.neural is not None:
            out = out + self.neural(y)
        return out

    def new_accumulator(self):
        return (self.physical.new_accumulator(),
                self.neural.new_accumulator() if self.neural is not None else None)

    def vjp(self, y, ct, acc):
        out = self.physical.vjp(y, ct, acc[0])
        if self.neural is not None:
            out = out + self.neural.vjp(y, ct, acc[1])
        return out

    def finalize(self, acc):
        g = self.physical.finalize(acc[0])
        if self.neural is not None:
            g = np.concatenate([g, self.neural.finalize(acc[1])])
        return g
