"""Recovery metrics, fidelity benchmarks and loss-landscape slices."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .generators import ExperimentConfig, ModelSpec, TrueParams, raw_from_rates, sample_true_params
from .measurement import DEFAULT_TIMES, ProtocolConfig, generate_dataset
from .neural import CombinedField
from .propagator import IntegratorConfig, evolve
from .seeding import substream

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.1
BLOCKS = ("H", "L", "NDE")


def relative_error(true_vec, est_vec) -> float:
    """``|true - est|_1 / |true|_1``."""
    t = np.asarray(true_vec, dtype=float)
    e = np.asarray(est_vec, dtype=float)
    if t.shape != e.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {e.shape}")
    norm = np.abs(t).sum()
    if norm == 0:
        raise ValueError("true vector has zero L1 norm")
    return float(np.abs(t - e).sum() / norm)


def is_success(eps: float) -> bool:
    return bool(eps < SUCCESS_THRESHOLD)


def parameter_errors(truth: TrueParams, est) -> tuple:
    """``(eps_H, eps_L)``; the rate error is taken on physical rates."""
    eps_h = relative_error(truth.theta_h, est.theta_h) if truth.theta_h.size else float("nan")
    eps_l = relative_error(truth.gamma, est.gamma)
    return eps_h, eps_l


def _clamped_psd(rho: np.ndarray):
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    clamp = float(-w[w < 0].sum())
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    return w, v, clamp


def fidelity(rho1: np.ndarray, rho2: np.ndarray, herm_tol: float = 1e-8) -> float:
    """Uhlmann fidelity ``(Tr sqrt(sqrt(r1) r2 sqrt(r1)))**2``.

    Negative eigenvalues are clamped to zero and the spectrum renormalised
    before any square root is taken.
    """
    for r in (rho1, rho2):
        if np.max(np.abs(r - r.conj().T)) > herm_tol:
            raise ValueError("fidelity needs Hermitian inputs")
    w1, v1, c1 = _clamped_psd(rho1)
    w2, v2, c2 = _clamped_psd(rho2)
    if c1 + c2 > 1e-7:
        log.debug("clamped negative eigenvalue mass %.3e", c1 + c2)
    s1 = (v1 * np.sqrt(w1)) @ v1.conj().T
    r2 = (v2 * w2) @ v2.conj().T
    inner = s1 @ r2 @ s1
    mu = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.conj().T)), 0.0, None)
    return float(min(1.0, np.sum(np.sqrt(mu)) ** 2))


@dataclass
class InfidelityCurve:
    times: np.ndarray
    renormalized: np.ndarray
    mean_infidelity: np.ndarray
    per_state: np.ndarray  # (n_states, T)

    def slope(self, t_from: float) -> float:
        """Largest ``|dI / d(tR)|`` over renormalised times beyond ``t_from``."""
        sel = self.renormalized >= t_from
        x, y = self.renormalized[sel], self.mean_infidelity[sel]
        if x.size < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(y) / np.diff(x))))


def _field_for(model: ModelSpec, params, nde_enabled: bool = False):
    theta_l = params.theta_l
    phi = getattr(params, "phi", None)
    return CombinedField(model, params.theta_h, theta_l, phi, nde_enabled and phi is not None)


def infidelity_curve(truth, estimate, model: ModelSpec, rho0s: Sequence[np.ndarray], horizon_factor: float,
                     ratio: float, train_times: Sequence[float] = DEFAULT_TIMES, n_points: Optional[int] = None,
                     integrator: Optional[IntegratorConfig] = None, nde_enabled: bool = False) -> InfidelityCurve:
    """Mean infidelity between true and estimated evolutions out to
    ``horizon_factor * max(train_times)``.

    The default grid repeats the training spacing, so it has
    ``horizon_factor * len(train_times)`` points.
    """
    if horizon_factor < 1:
        raise ValueError("horizon_factor must be at least 1")
    train_times = np.asarray(train_times, dtype=float)
    t_max = horizon_factor * train_times[-1]
    if n_points is None:
        n_points = int(round(horizon_factor * len(train_times)))
    times = np.linspace(t_max / n_points, t_max, n_points)
    f_true = _field_for(model, truth)
    f_est = _field_for(model, estimate, nde_enabled)
    per_state = np.empty((len(rho0s), times.size))
    for i, rho0 in enumerate(rho0s):
        a = evolve(f_true, rho0, times, integrator).states
        b = evolve(f_est, rho0, times, integrator).states
        per_state[i] = [1.0 - fidelity(x, y) for x, y in zip(a, b)]
    return InfidelityCurve(times, times * ratio, per_state.mean(axis=0), per_state)


# --------------------------------------------------------------------------
# success rates


@dataclass
class SeedRecord:
    seed: int
    eps_h: float
    eps_l: float
    success_h: bool
    success_l: bool
    error: Optional[str] = None


def success_rate(config: ExperimentConfig, n_seeds: int, trainer: Callable,
                 protocol: Optional[ProtocolConfig] = None, integrator: Optional[IntegratorConfig] = None):
    """Fraction of seeds whose trained estimate lands within 10% L1 error.

    ``trainer(dataset, model, truth, seed)`` returns an object with
    ``theta_h`` and ``gamma`` attributes. Seed ``k`` uses master seed
    ``config.seed + k`` for truth, data and initialisation. Failures are
    recorded and count as unsuccessful.
    """
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    protocol = protocol or ProtocolConfig()
    records = []
    for k in range(n_seeds):
        seed = config.seed + k
        try:
            model, truth = sample_true_params(config, substream(seed, "truth"))
            proto = ProtocolConfig(protocol.L, protocol.times, protocol.K, protocol.M, seed)
            ds = generate_dataset(model, truth, proto, integrator)
            est = trainer(ds, model, truth, seed)
            eh, el = parameter_errors(truth, est)
            records.append(SeedRecord(seed, eh, el, is_success(eh), is_success(el)))
        except Exception as exc:  # a failed seed is data, not a crash
            log.warning("seed %d failed: %s", seed, exc)
            records.append(SeedRecord(seed, float("nan"), float("nan"), False, False, str(exc)))
    rate_h = float(np.mean([r.success_h for r in records]))
    rate_l = float(np.mean([r.success_l for r in records]))
    return rate_h, rate_l, records


# --------------------------------------------------------------------------
# landscapes


def block_mask(selector: Iterable[str], sizes: Sequence[int]) -> np.ndarray:
    """Boolean mask over the flat ``(H, L, NDE)`` vector for the chosen blocks."""
    sel = set(selector)
    if not sel or sel - set(BLOCKS):
        raise ValueError(f"selector must be a non-empty subset of {BLOCKS}, got {sorted(sel)}")
    parts = [np.full(int(sz), name in sel) for name, sz in zip(BLOCKS, sizes)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def parse_selector(text: str) -> tuple:
    """``"HL"`` -> ``("H", "L")``; ``"NDE"`` and ``"H+NDE"`` are accepted too."""
    t = text.upper().replace("+", "").replace(",", "")
    out = []
    if "NDE" in t:
        out.append("NDE")
        t = t.replace("NDE", "")
    for c in t:
        if c not in "HL":
            raise ValueError(f"bad subspace selector {text!r}")
        out.append(c)
    return tuple(dict.fromkeys(out))


def random_orthogonal_plane(selector: Iterable[str], sizes: Sequence[int], rng: np.random.Generator,
                            max_tries: int = 100):
    """Two orthonormal Gaussian directions supported on the selected blocks."""
    mask = block_mask(selector, sizes)
    k = int(mask.sum())
    if k < 2:
        raise ValueError("selected subspace must have dimension at least 2")
    for _ in range(max_tries):
        a = rng.normal(size=k)
        b = rng.normal(size=k)
        a /= np.linalg.norm(a)
        b = b - (a @ b) * a
        nb = np.linalg.norm(b)
        if nb > 1e-8:
            b /= nb
            break
    else:
        raise RuntimeError("could not draw two independent directions")
    v1 = np.zeros(mask.size)
    v2 = np.zeros(mask.size)
    v1[mask] = a
    v2[mask] = b
    return v1, v2


@dataclass
class LandscapeScan:
    center: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # (len(alphas), len(betas)); NaN marks a failed cell
    epoch: Optional[str] = None
    failures: list = field(default_factory=list)

    def rows(self):
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                yield float(a), float(b), float(self.losses[i, j])


def landscape_scan(center, v1, v2, radius: float, grid_n: int, loss: Callable, epoch=None) -> LandscapeScan:
    """Evaluate ``loss(center + a v1 + b v2)`` on a square ``grid_n x grid_n`` grid.

    Offsets on the rate block act on the raw softplus inputs, so every grid
    point is a physical generator.
    """
    if grid_n < 3 or grid_n % 2 == 0:
        raise ValueError("grid_n must be odd and at least 3")
    center = np.asarray(center, dtype=float)
    offs = np.linspace(-radius, radius, grid_n)
    if radius == 0:
        offs = np.zeros(grid_n)
    vals = np.full((grid_n, grid_n), np.nan)
    failures = []
    for i, a in enumerate(offs):
        for j, b in enumerate(offs):
            try:
                vals[i, j] = loss(center + a * v1 + b * v2)
            except Exception as exc:
                failures.append((i, j, str(exc)))
    return LandscapeScan(center, np.asarray(v1), np.asarray(v2), offs, offs.copy(), vals, epoch, failures)


def trajectory_projection(snapshots: Sequence[np.ndarray], true_flat, v1, v2) -> list:
    """Coordinates ``((theta - theta_true).v1, (theta - theta_true).v2)`` per snapshot."""
    true_flat = np.asarray(true_flat, dtype=float)
    return [(float((s - true_flat) @ v1), float((s - true_flat) @ v2)) for s in snapshots]


def truth_flat(truth: TrueParams, n_phi: int = 0) -> np.ndarray:
    """Ground truth in the flat trainable coordinates (raw rates, zero network)."""
    return np.concatenate([truth.theta_h, raw_from_rates(truth.gamma), np.zeros(n_phi)])


# --------------------------------------------------------------------------
# plotting-ready CSV files


def write_success_rates(path, rows: Iterable[dict]) -> None:
    cols = ["family", "noise", "R", "N", "seed", "eps_H", "eps_L", "success_H", "success_L"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_infidelity(path, curve: InfidelityCurve, n: int, ratio: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "t_R", "mean_infidelity", "N", "R"])
        for t, tr, inf in zip(curve.times, curve.renormalized, curve.mean_infidelity):
            w.writerow([repr(float(t)), repr(float(tr)), repr(float(inf)), n, ratio])


def write_landscape(path, scan: LandscapeScan) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "beta", "loss"])
        for a, b, v in scan.rows():
            w.writerow([repr(a), repr(b), repr(v)])


def write_trajectory(path, coords: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "alpha", "beta"])
        for k, (a, b) in enumerate(coords):
            w.writerow([k, repr(a), repr(b)])
