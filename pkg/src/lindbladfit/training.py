"""Negative log-likelihood training with Adam and the two curricula."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .generators import ModelSpec, raw_from_rates, rates_from_raw
from .measurement import ShotDataset
from .neural import CombinedField, MlpParams
from .propagator import IntegratorConfig, evolve, evolve_with_gradient
from .seeding import substream
from .spinops import measurement_vectors

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    """NaN gradients, diverged trajectories or other unrecoverable failures."""


@dataclass
class GeneratorParams:
    """A point of the variational space: ``(theta_H, theta_L, phi)``."""

    theta_h: np.ndarray
    theta_l: np.ndarray
    phi: Optional[MlpParams] = None

    def __post_init__(self):
        self.theta_h = np.asarray(self.theta_h, dtype=float)
        self.theta_l = np.asarray(self.theta_l, dtype=float)

    @property
    def gamma(self) -> np.ndarray:
        return rates_from_raw(self.theta_l)

    def flatten(self, include_phi: bool = True) -> np.ndarray:
        parts = [self.theta_h, self.theta_l]
        if include_phi and self.phi is not None:
            parts.append(self.phi.flatten())
        return np.concatenate(parts)

    def with_flat(self, flat, include_phi: bool = True) -> "GeneratorParams":
        flat = np.asarray(flat, dtype=float)
        nh, nl = self.theta_h.size, self.theta_l.size
        phi = self.phi
        if include_phi and phi is not None:
            phi = MlpParams.unflatten(flat[nh + nl:], phi.widths)
        elif flat.size != nh + nl:
            raise ValueError("flat vector length does not match parameters")
        return GeneratorParams(flat[:nh].copy(), flat[nh:nh + nl].copy(), phi)

    def copy(self) -> "GeneratorParams":
        phi = None if self.phi is None else MlpParams.unflatten(self.phi.flatten(), self.phi.widths)
        return GeneratorParams(self.theta_h.copy(), self.theta_l.copy(), phi)

    def to_dict(self) -> dict:
        d = {"theta_H": self.theta_h.tolist(), "theta_L": self.theta_l.tolist(),
             "gamma": self.gamma.tolist()}
        if self.phi is not None:
            d["phi"] = self.phi.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        phi = MlpParams.from_dict(d["phi"]) if d.get("phi") else None
        return cls(np.asarray(d["theta_H"], dtype=float), np.asarray(d["theta_L"], dtype=float), phi)


def init_variational_params(model: ModelSpec, rng: np.random.Generator, with_phi: bool = False,
                            hidden: Optional[int] = None) -> GeneratorParams:
    """``theta_H ~ U(-1, 1)``, rates ``~ U(0.2, 1)``, optional zero-output MLP."""
    theta_h = rng.uniform(-1.0, 1.0, size=model.n_h)
    theta_l = raw_from_rates(rng.uniform(0.2, 1.0, size=model.n_l))
    phi = MlpParams.init(model.n, rng, hidden) if with_phi else None
    return GeneratorParams(theta_h, theta_l, phi)


# --------------------------------------------------------------------------
# batches and the loss


@dataclass
class Batch:
    """All records of one ``(initial state, shot index)`` pair."""

    state_id: int
    shot_index: int
    time_index: np.ndarray
    bases: np.ndarray
    bits: np.ndarray
    _vectors: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return int(self.time_index.size)

    @property
    def vectors(self) -> np.ndarray:
        if self._vectors is None:
            self._vectors = measurement_vectors(self.bases, self.bits)
        return self._vectors


def dataset_batches(dataset: ShotDataset) -> dict:
    """Every ``(state, shot)`` batch keyed by the pair, checked for completeness."""
    proto = dataset.protocol
    groups = dataset.groups()
    expected = proto.J * proto.K
    out = {}
    for l in range(proto.L):
        for m in range(proto.M):
            idx = groups.get((l, m))
            if idx is None or idx.size != expected:
                got = 0 if idx is None else idx.size
                raise TrainingError(f"incomplete dataset: state {l} shot {m} has {got} of {expected} records")
            out[(l, m)] = Batch(l, m, dataset.time_index[idx], dataset.bases[idx], dataset.bits[idx])
    return out


def make_epoch_batches(dataset: ShotDataset, rng: np.random.Generator, batches: Optional[dict] = None) -> list:
    """One batch per ``(state, shot)`` pair in a freshly shuffled order."""
    batches = dataset_batches(dataset) if batches is None else batches
    keys = sorted(batches)
    order = rng.permutation(len(keys))
    return [batches[keys[i]] for i in order]


def _nll_closure(batch: Batch, n_times: int, mean: bool):
    u = batch.vectors
    tix = batch.time_index
    onehot = np.zeros((n_times, len(batch)))
    onehot[tix, np.arange(len(batch))] = 1.0
    scale = 1.0 / len(batch) if mean else 1.0

    def loss_fn(states):
        p = np.einsum("ra,rab,rb->r", u.conj(), states[tix], u).real
        keep = p > PROB_FLOOR
        pf = np.where(keep, p, PROB_FLOOR)
        loss = -np.sum(np.log(pf)) * scale
        w = np.where(keep, -1.0 / pf, 0.0) * scale
        cts = np.einsum("tr,ra,rb->tab", onehot * w, u, u.conj())
        return loss, cts

    return loss_fn


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    min_eigenvalue: float


def nll_loss_and_grad(params: GeneratorParams, model: ModelSpec, nde_enabled: bool, batch: Batch,
                      rho0: np.ndarray, times, integrator: Optional[IntegratorConfig] = None,
                      l2_lambda: float = 0.0, mean: bool = False) -> LossResult:
    """Batch NLL and its gradient over ``(theta_H, theta_L[, phi])``.

    The ``phi`` block is present only when ``nde_enabled``; the L2 penalty is
    added only then as well.
    """
    times = np.asarray(times, dtype=float)
    fld = CombinedField(model, params.theta_h, params.theta_l, params.phi, nde_enabled)
    try:
        loss, grad, traj = evolve_with_gradient(fld, rho0, times, _nll_closure(batch, len(times), mean),
                                                integrator)
    except Exception as exc:
        raise TrainingError(f"forward/backward pass failed: {exc}") from exc
    if nde_enabled and params.phi is not None and l2_lambda > 0:
        flat_phi = params.phi.flatten()
        loss += l2_lambda * float(flat_phi @ flat_phi)
        grad[model.n_h + model.n_l:] += 2.0 * l2_lambda * flat_phi
    min_eig = float(min(np.linalg.eigvalsh(s)[0] for s in traj.states))
    return LossResult(loss, grad, min_eig)


def nll_loss(params: GeneratorParams, model: ModelSpec, nde_enabled: bool, batch: Batch, rho0, times,
             integrator: Optional[IntegratorConfig] = None, l2_lambda: float = 0.0, mean: bool = False) -> float:
    """Forward-only batch NLL (sum of ``-log p``, plus L2 when the NDE is on)."""
    times = np.asarray(times, dtype=float)
    fld = CombinedField(model, params.theta_h, params.theta_l, params.phi, nde_enabled)
    traj = evolve(fld, rho0, times, integrator)
    loss, _ = _nll_closure(batch, len(times), mean)(traj.states)
    if nde_enabled and params.phi is not None and l2_lambda > 0:
        loss += l2_lambda * float(np.sum(params.phi.flatten() ** 2))
    return float(loss)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, **kw)

    def is_reset(self) -> bool:
        return self.step == 0 and not np.any(self.m) and not np.any(self.v)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: np.ndarray):
    """Bias-corrected Adam update with a per-coordinate learning rate.

    Returns ``(new_state, new_params)``; inputs are left untouched.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes disagree")
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient at Adam step {state.step + 1}")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), new


def block_learning_rates(model: ModelSpec, n_phi: int, lr_h: float, lr_l: float, lr_nde: float) -> np.ndarray:
    return np.concatenate([np.full(model.n_h, lr_h), np.full(model.n_l, lr_l), np.full(n_phi, lr_nde)])


# --------------------------------------------------------------------------
# curricula


@dataclass(frozen=True)
class CurriculumPhase:
    name: str
    label: str  # A, B, C or D, as written to loss.csv
    epochs: int
    lr_h: float
    lr_l: float
    lr_nde: float = 0.0
    nde_enabled: bool = False
    l2_lambda: float = 0.0
    reset_optimizer_on_entry: bool = True

    def __post_init__(self):
        if self.epochs < 0 or min(self.lr_h, self.lr_l, self.lr_nde) < 0:
            raise ValueError("epochs and learning rates must be non-negative")


@dataclass(frozen=True)
class TrainerConfig:
    """Curriculum settings; defaults follow the published schedule."""

    kind: str = "vanilla"  # or "nde"
    warmup_epochs: int = 20
    refine_epochs: int = 10
    finetune_epochs: tuple = (5, 5)
    lr: float = 1e-3
    lr_fine: float = 1e-4
    lr_nde: float = 2e-3
    l2_lambda: float = 0.1
    fine_tune: str = "auto"  # auto | always | never
    fine_tune_window: int = 5
    fine_tune_threshold: float = 1e-3
    residual_epochs: int = 0  # optional phi-only fine-tune with theta frozen
    mean_loss: bool = False
    hidden: Optional[int] = None
    seed: int = 0
    eval_init_loss: bool = True

    def __post_init__(self):
        if self.kind not in ("vanilla", "nde"):
            raise ValueError(f"unknown trainer kind {self.kind!r}")
        if self.fine_tune not in ("auto", "always", "never"):
            raise ValueError(f"fine_tune must be auto, always or never, not {self.fine_tune!r}")
        object.__setattr__(self, "finetune_epochs", tuple(self.finetune_epochs))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["finetune_epochs"] = list(self.finetune_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: (tuple(v) if k == "finetune_epochs" else v) for k, v in d.items() if k in known})


@dataclass
class EpochLog:
    epoch: int
    phase: str
    mean_loss: float
    grad_norm: float
    min_eigenvalue_seen: float


@dataclass
class TrainingRun:
    phases: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    final: Optional[GeneratorParams] = None
    final_nde_enabled: bool = False
    init_loss: Optional[float] = None
    wall_clock: float = 0.0
    config: Optional[dict] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.mean_loss for e in self.epochs])

    def loss_csv_rows(self) -> list:
        return [[e.epoch, e.phase, repr(e.mean_loss), repr(e.grad_norm), repr(e.min_eigenvalue_seen)]
                for e in self.epochs]

    def save(self, run_dir) -> None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase", "mean_loss", "grad_norm", "min_eigenvalue_seen"])
            w.writerows(self.loss_csv_rows())
        for k, snap in enumerate(self.snapshots):
            _dump_json(os.path.join(run_dir, f"params_epoch_{k}.json"), snap.to_dict())
        final = self.final.to_dict()
        final["nde_enabled"] = self.final_nde_enabled
        _dump_json(os.path.join(run_dir, "final_params.json"), final)
        _dump_json(os.path.join(run_dir, "phases.json"), {"phases": self.phases, "init_loss": self.init_loss})
        with open(os.path.join(run_dir, "run.log"), "w") as fh:
            fh.write(f"wall_clock_seconds {self.wall_clock:.3f}\n")


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


class _Trainer:
    """Runs a list of phases against one dataset, recording everything."""

    def __init__(self, dataset: ShotDataset, model: ModelSpec, params: GeneratorParams, cfg: TrainerConfig,
                 integrator: Optional[IntegratorConfig]):
        self.ds = dataset
        self.model = model
        self.params = params.copy()
        self.cfg = cfg
        self.integrator = integrator
        self.times = np.asarray(dataset.times)
        self.batches = dataset_batches(dataset)
        self.rho0 = [dataset.initial_rho(l) for l in range(len(dataset.initial_states))]
        self.shuffle_rng = substream(cfg.seed, "batches")
        self.run = TrainingRun(config=cfg.to_dict())
        self.run.snapshots.append(self.params.copy())
        self.epoch = 0

    def mean_loss(self, nde_enabled: bool, l2: float) -> float:
        vals = [nll_loss(self.params, self.model, nde_enabled, b, self.rho0[b.state_id], self.times,
                         self.integrator, l2, self.cfg.mean_loss) for b in self.batches.values()]
        return float(np.mean(vals))

    def run_phase(self, ph: CurriculumPhase, extra: Optional[dict] = None) -> None:
        nde = ph.nde_enabled and self.params.phi is not None
        n_phi = self.params.phi.size if nde else 0
        lr = block_learning_rates(self.model, n_phi, ph.lr_h, ph.lr_l, ph.lr_nde)
        if ph.reset_optimizer_on_entry or not hasattr(self, "adam") or self.adam.m.size != lr.size:
            self.adam = AdamState.zeros(lr.size)
        entry = {"name": ph.name, "label": ph.label, "epochs": ph.epochs, "lr_h": ph.lr_h, "lr_l": ph.lr_l,
                 "lr_nde": ph.lr_nde, "nde_enabled": nde, "l2_lambda": ph.l2_lambda,
                 "reset": ph.reset_optimizer_on_entry, "moments_zero_at_entry": self.adam.is_reset(),
                 "first_epoch": self.epoch + 1}
        entry.update(extra or {})
        self.run.phases.append(entry)
        log.info("phase %s: %d epochs, lr_H=%g lr_L=%g lr_NDE=%g nde=%s", ph.name, ph.epochs, ph.lr_h,
                 ph.lr_l, ph.lr_nde, nde)
        for _ in range(ph.epochs):
            self._epoch(ph, nde, lr)

    def _epoch(self, ph: CurriculumPhase, nde: bool, lr: np.ndarray) -> None:
        losses, gnorms, min_eig = [], [], np.inf
        for batch in make_epoch_batches(self.ds, self.shuffle_rng, self.batches):
            res = nll_loss_and_grad(self.params, self.model, nde, batch, self.rho0[batch.state_id], self.times,
                                    self.integrator, ph.l2_lambda if nde else 0.0, self.cfg.mean_loss)
            flat = self.params.flatten(include_phi=nde)
            self.adam, flat = adam_step(self.adam, flat, res.grad, lr)
            self.params = self.params.with_flat(flat, include_phi=nde)
            losses.append(res.loss)
            gnorms.append(float(np.linalg.norm(res.grad)))
            min_eig = min(min_eig, res.min_eigenvalue)
        self.epoch += 1
        rec = EpochLog(self.epoch, ph.label, float(np.mean(losses)), float(np.mean(gnorms)), float(min_eig))
        self.run.epochs.append(rec)
        self.run.snapshots.append(self.params.copy())
        log.info("epoch %d [%s] loss %.6g", rec.epoch, rec.phase, rec.mean_loss)

    def still_improving(self) -> bool:
        w = self.cfg.fine_tune_window
        losses = self.run.losses
        if len(losses) <= w:
            return True
        ref = losses[-w - 1]
        return (ref - losses[-1]) / abs(ref) > self.cfg.fine_tune_threshold

    def fine_tune(self) -> None:
        cfg = self.cfg
        if cfg.fine_tune == "never" or (cfg.fine_tune == "auto" and not self.still_improving()):
            self.run.phases.append({"name": "fine-tune", "label": "C", "skipped": True})
            return
        lind = float(np.abs(self.params.gamma).sum())
        ham = float(np.abs(self.params.theta_h).sum())
        swapped = lind > ham
        lr_h, lr_l = (cfg.lr, cfg.lr_fine) if swapped else (cfg.lr_fine, cfg.lr)
        e1, e2 = cfg.finetune_epochs
        info = {"swapped": swapped, "lindblad_l1": lind, "hamiltonian_l1": ham}
        self.run_phase(CurriculumPhase("fine-tune-1", "C", e1, lr_h, lr_l), info)
        self.run_phase(CurriculumPhase("fine-tune-2", "C", e2, cfg.lr_fine, cfg.lr_fine), info)


def run_vanilla_curriculum(dataset: ShotDataset, model: ModelSpec, init_params: GeneratorParams,
                           cfg: Optional[TrainerConfig] = None,
                           integrator: Optional[IntegratorConfig] = None) -> TrainingRun:
    """Warm-up at ``lr`` for both blocks, then the optional two-stage fine-tune."""
    cfg = cfg or TrainerConfig()
    start = time.perf_counter()
    params = GeneratorParams(init_params.theta_h, init_params.theta_l, None)
    tr = _Trainer(dataset, model, params, cfg, integrator)
    if cfg.eval_init_loss:
        tr.run.init_loss = tr.mean_loss(False, 0.0)
    tr.run_phase(CurriculumPhase("warm-up", "A", cfg.warmup_epochs, cfg.lr, cfg.lr))
    tr.fine_tune()
    tr.run.final = tr.params.copy()
    tr.run.final_nde_enabled = False
    tr.run.wall_clock = time.perf_counter() - start
    return tr.run


def run_nde_curriculum(dataset: ShotDataset, model: ModelSpec, init_params: GeneratorParams,
                       init_phi: Optional[MlpParams] = None, cfg: Optional[TrainerConfig] = None,
                       integrator: Optional[IntegratorConfig] = None) -> TrainingRun:
    """Joint warm-up with the neural term, analytic refinement, fine-tune.

    The returned model has the neural term switched off unless the optional
    residual phase (``cfg.residual_epochs > 0``) is requested.
    """
    cfg = cfg or TrainerConfig(kind="nde")
    phi = init_phi if init_phi is not None else init_params.phi
    if phi is None:
        raise ValueError("the NDE curriculum needs initial network weights")
    start = time.perf_counter()
    tr = _Trainer(dataset, model, GeneratorParams(init_params.theta_h, init_params.theta_l, phi), cfg, integrator)
    if cfg.eval_init_loss:
        tr.run.init_loss = tr.mean_loss(True, cfg.l2_lambda)
    tr.run_phase(CurriculumPhase("warm-up", "A", cfg.warmup_epochs, cfg.lr, cfg.lr, cfg.lr_nde, True,
                                 cfg.l2_lambda))
    tr.run_phase(CurriculumPhase("refine", "B", cfg.refine_epochs, cfg.lr, cfg.lr))
    tr.fine_tune()
    final_nde = False
    if cfg.residual_epochs > 0:
        tr.run_phase(CurriculumPhase("residual", "D", cfg.residual_epochs, 0.0, 0.0, cfg.lr_nde, True,
                                     cfg.l2_lambda))
        final_nde = True
    tr.run.final = tr.params.copy()
    tr.run.final_nde_enabled = final_nde
    tr.run.wall_clock = time.perf_counter() - start
    return tr.run


def train(dataset: ShotDataset, model: ModelSpec, cfg: TrainerConfig,
          integrator: Optional[IntegratorConfig] = None) -> TrainingRun:
    """Initialise from ``cfg.seed`` and run the configured curriculum."""
    rng = substream(cfg.seed, "init")
    init = init_variational_params(model, rng, with_phi=cfg.kind == "nde", hidden=cfg.hidden)
    if cfg.kind == "nde":
        return run_nde_curriculum(dataset, model, init, cfg=cfg, integrator=integrator)
    return run_vanilla_curriculum(dataset, model, init, cfg, integrator)
