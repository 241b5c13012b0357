"""Random-Pauli shot data at transient times.

Datasets are held column-wise in numpy arrays. On disk a dataset is one JSON
header line followed by one ``state_id,t,basis,bits`` line per shot.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .generators import LindbladField, ModelSpec, TrueParams
from .propagator import IntegratorConfig, evolve
from .seeding import substream
from .spinops import BASIS_LABELS, InitialStateSpec, PauliString, basis_rotation, product_eigenstate

FORMAT_VERSION = 1
DEFAULT_TIMES = tuple(round(0.1 * k, 10) for k in range(1, 11))
_AXIS_OPTIONS = [(a, s) for a in BASIS_LABELS for s in (1, -1)]


class DatasetFormatError(ValueError):
    pass


class ProbabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    L: int = 5
    times: tuple = DEFAULT_TIMES
    K: int = 200
    M: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if min(self.L, self.K, self.M, len(self.times)) < 1:
            raise ValueError("protocol counts must all be at least 1")
        t = np.asarray(self.times)
        if t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be positive and ascending")

    @property
    def J(self) -> int:
        return len(self.times)

    @property
    def n_records(self) -> int:
        return self.L * self.J * self.K * self.M

    def to_dict(self) -> dict:
        d = asdict(self)
        d["times"] = list(self.times)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        return cls(**{k: v for k, v in d.items() if k in ("L", "times", "K", "M", "seed")})


@dataclass(frozen=True)
class MeasurementRecord:
    state_id: int
    t: float
    basis: str
    bits: str


def _basis_str(codes) -> str:
    return "".join(BASIS_LABELS[c] for c in codes)


def _bits_str(bits) -> str:
    return "".join("1" if b else "0" for b in bits)


@dataclass
class ShotDataset:
    """Measurement records plus protocol metadata.

    Column arrays share their first axis: ``state_id``, ``time_index``,
    ``bases`` (integer codes 0=X, 1=Y, 2=Z), ``bits`` and ``shot``.
    """

    meta: dict
    initial_states: list
    times: np.ndarray
    state_id: np.ndarray
    time_index: np.ndarray
    bases: np.ndarray
    bits: np.ndarray
    shot: np.ndarray
    _groups: Optional[dict] = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return int(self.state_id.size)

    @property
    def n(self) -> int:
        return int(self.meta["model"]["N"])

    @property
    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig.from_dict(self.meta["protocol"])

    @property
    def model(self) -> ModelSpec:
        return ModelSpec.from_dict(self.meta["model"])

    @property
    def truth(self) -> Optional[TrueParams]:
        t = self.meta.get("truth")
        return TrueParams.from_dict(t) if t else None

    def records(self) -> Iterator[MeasurementRecord]:
        for i in range(len(self)):
            yield MeasurementRecord(int(self.state_id[i]), float(self.times[self.time_index[i]]),
                                    _basis_str(self.bases[i]), _bits_str(self.bits[i]))

    def initial_rho(self, state_id: int) -> np.ndarray:
        return product_eigenstate(self.initial_states[state_id])

    def groups(self) -> dict:
        """Record indices keyed by ``(state_id, shot)``."""
        if self._groups is None:
            order = np.lexsort((self.shot, self.state_id))
            keys = np.stack([self.state_id[order], self.shot[order]], axis=1)
            out = {}
            if len(order):
                cuts = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
                for chunk in np.split(order, cuts):
                    out[(int(self.state_id[chunk[0]]), int(self.shot[chunk[0]]))] = np.sort(chunk)
            self._groups = out
        return self._groups

    def equals(self, other: "ShotDataset") -> bool:
        return (self.meta == other.meta
                and [str(s) for s in self.initial_states] == [str(s) for s in other.initial_states]
                and np.array_equal(self.times, other.times)
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("state_id", "time_index", "bases", "bits", "shot")))


# --------------------------------------------------------------------------
# sampling primitives


def sample_initial_states(L: int, n: int, rng: np.random.Generator) -> list:
    if L < 1:
        raise ValueError("need at least one initial state")
    picks = rng.integers(0, 6, size=(L, n))
    return [InitialStateSpec("".join(_AXIS_OPTIONS[c][0] for c in row),
                             tuple(_AXIS_OPTIONS[c][1] for c in row)) for row in picks]


def sample_basis_codes(K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if K < 1:
        raise ValueError("need at least one basis")
    return rng.integers(0, 3, size=(K, n))


def sample_bases(K: int, n: int, rng: np.random.Generator) -> list:
    return [PauliString(_basis_str(row)) for row in sample_basis_codes(K, n, rng)]


def outcome_distribution(rho: np.ndarray, basis) -> np.ndarray:
    """Born probabilities of all ``2**n`` bitstrings in a Pauli basis."""
    u = basis_rotation(basis)
    p = np.einsum("bi,ij,bj->b", u, rho, u.conj()).real
    return _normalise_probs(p)


def _normalise_probs(p: np.ndarray) -> np.ndarray:
    """Clamp negative entries to zero; renormalise only rows that needed it."""
    neg = np.any(p < 0, axis=-1, keepdims=True)
    p = np.clip(p, 0.0, None)
    total = p.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > 1e-9):
        raise ProbabilityError(f"outcome probabilities sum to {np.ravel(total)} instead of 1")
    return np.where(neg, p / total, p)


def sample_outcomes(probs: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """Outcome indices of ``M`` i.i.d. categorical draws."""
    probs = np.asarray(probs, dtype=float)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ProbabilityError("probabilities must sum to one")
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(M), side="right")


def outcomes_to_bits(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    shifts = np.arange(n - 1, -1, -1)
    return ((idx[..., None] >> shifts) & 1).astype(np.uint8)


def sample_shots(probs, M: int, rng: np.random.Generator) -> list:
    n = int(round(np.log2(len(probs))))
    return [_bits_str(b) for b in outcomes_to_bits(sample_outcomes(probs, M, rng), n)]


# --------------------------------------------------------------------------
# dataset generation


def _rotations(codes: np.ndarray) -> np.ndarray:
    return np.stack([basis_rotation(_basis_str(c)) for c in codes])


def generate_dataset(model: ModelSpec, truth: TrueParams, protocol: ProtocolConfig,
                     integrator: Optional[IntegratorConfig] = None, extra_meta: Optional[dict] = None
                     ) -> ShotDataset:
    """Simulate the shot protocol under the true generator.

    Randomness comes only from ``protocol.seed`` (substreams ``states`` and
    per-state ``bases``/``shots``).
    """
    n = model.n
    field_ = LindbladField(model, truth.theta_h, truth.theta_l)
    states = sample_initial_states(protocol.L, n, substream(protocol.seed, "states"))
    times = np.asarray(protocol.times)
    J, K, M = protocol.J, protocol.K, protocol.M
    cols = {k: [] for k in ("state_id", "time_index", "bases", "bits", "shot")}
    for l, spec in enumerate(states):
        traj = evolve(field_, product_eigenstate(spec), times, integrator)
        rng_b = substream(protocol.seed, "bases", l)
        rng_s = substream(protocol.seed, "shots", l)
        for j in range(J):
            codes = sample_basis_codes(K, n, rng_b)
            rots = _rotations(codes)
            probs = np.einsum("kbi,ij,kbj->kb", rots, traj.states[j], rots.conj()).real
            probs = _normalise_probs(probs)
            outs = np.stack([sample_outcomes(p, M, rng_s) for p in probs])  # (K, M)
            cols["state_id"].append(np.full(K * M, l))
            cols["time_index"].append(np.full(K * M, j))
            cols["bases"].append(np.repeat(codes, M, axis=0))
            cols["bits"].append(outcomes_to_bits(outs.ravel(), n))
            cols["shot"].append(np.tile(np.arange(M), K))
    meta = {"version": FORMAT_VERSION, "model": model.to_dict(), "protocol": protocol.to_dict(),
            "initial_states": [str(s) for s in states], "truth": truth.to_dict()}
    if extra_meta:
        meta["model"].update(extra_meta)
    return ShotDataset(meta, states, times, np.concatenate(cols["state_id"]).astype(np.int64),
                       np.concatenate(cols["time_index"]).astype(np.int64),
                       np.concatenate(cols["bases"]).astype(np.int8),
                       np.concatenate(cols["bits"]).astype(np.uint8),
                       np.concatenate(cols["shot"]).astype(np.int64))


def empty_dataset(meta: dict, initial_states: list, times) -> ShotDataset:
    n = int(meta["model"]["N"])
    z = np.zeros(0, dtype=np.int64)
    return ShotDataset(meta, initial_states, np.asarray(times, dtype=float), z, z.copy(),
                       np.zeros((0, n), dtype=np.int8), np.zeros((0, n), dtype=np.uint8), z.copy())


# --------------------------------------------------------------------------
# file format


def write_dataset(ds: ShotDataset, path) -> None:
    header = json.dumps(ds.meta, sort_keys=True)
    letters = np.array(list(BASIS_LABELS))
    basis_s = ["".join(r) for r in letters[ds.bases]] if len(ds) else []
    bit_s = ["".join(r) for r in np.where(ds.bits == 1, "1", "0")] if len(ds) else []
    t_s = [format(float(t), ".17g") for t in ds.times]
    lines = [header]
    lines += [f"{s},{t_s[j]},{b},{x}" for s, j, b, x in zip(ds.state_id.tolist(), ds.time_index.tolist(),
                                                             basis_s, bit_s)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> ShotDataset:
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise DatasetFormatError(f"line {len(lines)}: truncated record (missing newline)")
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: bad header: {exc}") from None
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: unsupported format version {meta.get('version')!r}")
    n = int(meta["model"]["N"])
    protocol = ProtocolConfig.from_dict(meta["protocol"])
    times = np.asarray(protocol.times)
    t_lookup = {format(float(t), ".17g"): j for j, t in enumerate(times)}
    states = [InitialStateSpec.parse(s) for s in meta["initial_states"]]
    nrec = len(lines) - 1
    sid = np.empty(nrec, dtype=np.int64)
    tix = np.empty(nrec, dtype=np.int64)
    bases = np.empty((nrec, n), dtype=np.int8)
    bits = np.empty((nrec, n), dtype=np.uint8)
    code = {c: i for i, c in enumerate(BASIS_LABELS)}
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            s, t, b, x = parts
            sid[i] = int(s)
            if not 0 <= sid[i] < len(states):
                raise ValueError(f"state id {s} out of range")
            if t not in t_lookup:
                raise ValueError(f"time {t} not in protocol")
            tix[i] = t_lookup[t]
            if len(b) != n or len(x) != n or set(x) - {"0", "1"}:
                raise ValueError("basis/bits length or alphabet mismatch")
            bases[i] = [code[c] for c in b]
            bits[i] = [c == "1" for c in x]
        except (ValueError, KeyError) as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
    shot = _shot_indices(sid, tix, bases, protocol.M)
    return ShotDataset(meta, states, times, sid, tix, bases, bits, shot)


def _shot_indices(sid, tix, bases, M: int) -> np.ndarray:
    """Shot number = position within a run of identical (state, t, basis) lines, mod M."""
    shot = np.zeros(sid.size, dtype=np.int64)
    if sid.size == 0:
        return shot
    key_change = np.ones(sid.size, dtype=bool)
    key_change[1:] = (np.diff(sid) != 0) | (np.diff(tix) != 0) | np.any(np.diff(bases, axis=0) != 0, axis=1)
    starts = np.flatnonzero(key_change)
    run_start = starts[np.searchsorted(starts, np.arange(sid.size), side="right") - 1]
    return (np.arange(sid.size) - run_start) % M
