"""Command-line front end: ``lindbladfit {gen-data,train,eval,landscape,sweep}``.

Configs are TOML (or a previously emitted ``config.json``). Any key can be
overridden from the environment as ``LINDBLADFIT_<SECTION>__<KEY>=value``,
e.g. ``LINDBLADFIT_TRAINER__KIND=nde``; values are parsed as JSON when
possible. Top-level keys use a single name, e.g. ``LINDBLADFIT_SEED=3``.

Exit codes: 0 success, 2 config/validation error, 3 data generation
failure, 4 training failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np
from filelock import FileLock

from .evaluation import (
    infidelity_curve, is_success, landscape_scan, parameter_errors, parse_selector, random_orthogonal_plane,
    trajectory_projection, truth_flat, write_infidelity, write_landscape, write_success_rates,
    write_trajectory,
)
from .generators import DISSIPATOR_FAMILIES, HAMILTONIAN_FAMILIES, ExperimentConfig, sample_true_params
from .measurement import DEFAULT_TIMES, ProtocolConfig, generate_dataset, read_dataset, write_dataset
from .propagator import IntegratorConfig
from .seeding import substream
from .training import (
    GeneratorParams, TrainerConfig, TrainingError, dataset_batches, nll_loss, train,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("lindbladfit")

ENV_PREFIX = "LINDBLADFIT_"
DATASET_FILE = "dataset.csv"
TRUTH_FILE = "truth.json"
CONFIG_FILE = "config.json"

EXIT_OK, EXIT_CONFIG, EXIT_GENERATION, EXIT_TRAINING = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "dataset": None,
    "experiment": {"family": "xyz", "noise": "thermal", "N": 3, "R": 1.0},
    "protocol": {"L": 5, "times": list(DEFAULT_TIMES), "K": 200, "M": 100},
    "trainer": {k: v for k, v in TrainerConfig().to_dict().items() if k != "seed"},
    "integrator": IntegratorConfig().to_dict(),
    "evaluation": {"horizon_factor": 1000.0, "n_points": None, "subspace": "H", "epoch": "final",
                   "radius": 1.0, "grid": 41, "full_data": False, "landscape_state": 0, "landscape_shot": 0},
    "seeds": {"n_seeds": 1},
    "sweep": {"families": ["xyz"], "noises": ["thermal"], "ratios": [1.0], "sizes": [3]},
}


class ConfigError(ValueError):
    pass


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a table")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ) -> dict:
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys, ref = [], DEFAULTS
        for part in name[len(ENV_PREFIX):].split("__"):
            match = [k for k in ref if k.lower() == part.lower()] if isinstance(ref, dict) else []
            if not match:
                raise ConfigError(f"environment override {name} does not name a config key")
            keys.append(match[0])
            ref = ref[match[0]]
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = _parse_env_value(raw)
    return out


def load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            if path.endswith(".json"):
                return json.load(fh)
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def resolve_config(path: Optional[str] = None, environ=None, seed: Optional[int] = None,
                   out: Optional[str] = None) -> dict:
    """Defaults, then the file, then ``LINDBLADFIT_*`` variables, then flags."""
    cfg = _merge(DEFAULTS, load_config_file(path))
    cfg = _merge(cfg, env_overrides(os.environ if environ is None else environ))
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output_dir"] = out
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    exp = cfg["experiment"]
    if exp["family"] not in HAMILTONIAN_FAMILIES:
        raise ConfigError(f"unknown Hamiltonian family {exp['family']!r}")
    if exp["noise"] not in DISSIPATOR_FAMILIES:
        raise ConfigError(f"unknown dissipator family {exp['noise']!r}")
    if not isinstance(exp["N"], int) or not 1 <= exp["N"] <= 6:
        raise ConfigError("experiment.N must be an integer in 1..6")
    if exp["family"] == "pxp" and exp["N"] < 3:
        raise ConfigError("the PXP family needs N >= 3")
    if not float(exp["R"]) > 0:
        raise ConfigError("experiment.R must be positive")
    try:
        protocol_from(cfg)
        trainer_from(cfg)
        integrator_from(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ev = cfg["evaluation"]
    if ev["grid"] < 3 or ev["grid"] % 2 == 0:
        raise ConfigError("evaluation.grid must be odd and at least 3")
    if ev["horizon_factor"] < 1:
        raise ConfigError("evaluation.horizon_factor must be at least 1")
    if cfg["seeds"]["n_seeds"] < 1:
        raise ConfigError("seeds.n_seeds must be at least 1")


def protocol_from(cfg: dict) -> ProtocolConfig:
    p = cfg["protocol"]
    return ProtocolConfig(int(p["L"]), tuple(p["times"]), int(p["K"]), int(p["M"]), int(cfg["seed"]))


def trainer_from(cfg: dict) -> TrainerConfig:
    return TrainerConfig.from_dict({**cfg["trainer"], "seed": int(cfg["seed"])})


def integrator_from(cfg: dict) -> IntegratorConfig:
    return IntegratorConfig(**cfg["integrator"])


def experiment_from(cfg: dict) -> ExperimentConfig:
    e = cfg["experiment"]
    return ExperimentConfig(e["family"], e["noise"], int(e["N"]), float(e["R"]), int(cfg["seed"]))


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> str:
    """Sample a ground truth and its shot dataset into ``output_dir``."""
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    try:
        model, truth = sample_true_params(experiment_from(cfg), substream(cfg["seed"], "truth"))
        ds = generate_dataset(model, truth, protocol_from(cfg), integrator_from(cfg),
                              extra_meta={"R": float(cfg["experiment"]["R"])})
    except Exception as exc:
        raise CommandError(f"data generation failed: {exc}", EXIT_GENERATION) from exc
    path = os.path.join(out, DATASET_FILE)
    write_dataset(ds, path)
    _write_json(os.path.join(out, TRUTH_FILE), {"model": model.to_dict(), "truth": truth.to_dict()})
    _write_json(os.path.join(out, CONFIG_FILE), cfg)
    log.info("wrote %d records to %s", len(ds), path)
    return path


def _load_dataset(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise CommandError(f"dataset not found: {path}", EXIT_CONFIG) from None
    except ValueError as exc:
        raise CommandError(f"bad dataset {path}: {exc}", EXIT_CONFIG) from None


def _check_compatible(cfg: dict, ds) -> None:
    model = ds.model
    exp = cfg["experiment"]
    if model.n != exp["N"]:
        raise CommandError(f"dataset has N={model.n} but the config asks for N={exp['N']}", EXIT_CONFIG)
    if model.hamiltonian.family != exp["family"] or model.dissipator.family != exp["noise"]:
        raise CommandError(f"dataset model {model.hamiltonian.family}/{model.dissipator.family} does not match "
                           f"config {exp['family']}/{exp['noise']}", EXIT_CONFIG)


def cmd_train(cfg: dict, dataset_path: str) -> dict:
    """Train on a dataset; returns the errors when ground truth is known."""
    ds = _load_dataset(dataset_path)
    _check_compatible(cfg, ds)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    try:
        run = train(ds, ds.model, trainer_from(cfg), integrator_from(cfg))
    except (TrainingError, FloatingPointError) as exc:
        raise CommandError(f"training aborted: {exc}", EXIT_TRAINING) from exc
    run.save(out)
    resolved = dict(cfg)
    resolved["dataset"] = os.path.abspath(dataset_path)
    _write_json(os.path.join(out, CONFIG_FILE), resolved)
    result = {}
    truth = ds.truth
    if truth is not None:
        eh, el = parameter_errors(truth, run.final)
        result = {"eps_H": eh, "eps_L": el}
        print(f"eps_H {eh:.6g}  eps_L {el:.6g}")
    return result


def _run_dataset_path(run_dir: str, dataset_path: Optional[str]) -> str:
    if dataset_path:
        return dataset_path
    cfg_path = os.path.join(run_dir, CONFIG_FILE)
    if os.path.exists(cfg_path):
        recorded = _read_json(cfg_path).get("dataset")
        if recorded:
            return recorded
    raise CommandError("no dataset given and none recorded in the run directory", EXIT_CONFIG)


def _load_params(run_dir: str, epoch) -> GeneratorParams:
    if str(epoch) == "final":
        name = "final_params.json"
    elif str(epoch) == "init":
        name = "params_epoch_0.json"
    else:
        try:
            k = int(epoch)
        except ValueError:
            raise CommandError(f"unknown epoch {epoch!r}", EXIT_CONFIG) from None
        name = f"params_epoch_{k}.json"
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise CommandError(f"no parameters for epoch {epoch!r} in {run_dir}", EXIT_CONFIG)
    return GeneratorParams.from_dict(_read_json(path))


def cmd_eval(cfg: dict, run_dir: str, dataset_path: Optional[str] = None) -> dict:
    """Write ``eps.json`` and ``infidelity.csv`` for a finished run."""
    if not os.path.exists(os.path.join(run_dir, "final_params.json")):
        raise CommandError(f"missing final_params.json in {run_dir}", EXIT_CONFIG)
    est = _load_params(run_dir, "final")
    ds = _load_dataset(_run_dataset_path(run_dir, dataset_path))
    truth = ds.truth
    if truth is None:
        raise CommandError("dataset carries no ground truth", EXIT_CONFIG)
    eh, el = parameter_errors(truth, est)
    eps = {"eps_H": eh, "eps_L": el, "success_H": is_success(eh), "success_L": is_success(el),
           "success": is_success(eh) and is_success(el)}
    _write_json(os.path.join(run_dir, "eps.json"), eps)
    ev = cfg["evaluation"]
    ratio = float(ds.meta["model"].get("R", cfg["experiment"]["R"]))
    rho0s = [ds.initial_rho(l) for l in range(len(ds.initial_states))]
    curve = infidelity_curve(truth, est, ds.model, rho0s, float(ev["horizon_factor"]), ratio, ds.times,
                             ev["n_points"], integrator_from(cfg))
    write_infidelity(os.path.join(run_dir, "infidelity.csv"), curve, ds.model.n, ratio)
    print(f"eps_H {eh:.6g}  eps_L {el:.6g}")
    return eps


def cmd_landscape(cfg: dict, run_dir: str, dataset_path: Optional[str] = None) -> str:
    """Scan the NLL on a random plane through the chosen epoch's parameters."""
    ev = cfg["evaluation"]
    try:
        blocks = parse_selector(ev["subspace"])
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    params = _load_params(run_dir, ev["epoch"])
    with_nde = "NDE" in blocks
    if with_nde and params.phi is None:
        raise CommandError("subspace NDE requested but the run has no network parameters", EXIT_CONFIG)
    ds = _load_dataset(_run_dataset_path(run_dir, dataset_path))
    model = ds.model
    n_phi = params.phi.size if (with_nde and params.phi is not None) else 0
    sizes = (model.n_h, model.n_l, n_phi)
    rng = substream(cfg["seed"], "directions", ev["subspace"])
    try:
        v1, v2 = random_orthogonal_plane(blocks, sizes, rng)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    batches = dataset_batches(ds)
    if ev["full_data"]:
        chosen = list(batches.values())
    else:
        chosen = [batches[(int(ev["landscape_state"]), int(ev["landscape_shot"]))]]
    integ = integrator_from(cfg)
    l2 = float(cfg["trainer"]["l2_lambda"]) if with_nde else 0.0

    def loss(flat):
        p = params.with_flat(flat, include_phi=with_nde)
        return sum(nll_loss(p, model, with_nde, b, ds.initial_rho(b.state_id), ds.times, integ, l2)
                   for b in chosen)

    center = params.flatten(include_phi=with_nde)
    scan = landscape_scan(center, v1, v2, float(ev["radius"]), int(ev["grid"]), loss, str(ev["epoch"]))
    path = os.path.join(run_dir, "landscape.csv")
    write_landscape(path, scan)
    truth = ds.truth
    snaps = sorted(f for f in os.listdir(run_dir) if f.startswith("params_epoch_"))
    if truth is not None and snaps:
        k_max = max(int(f[len("params_epoch_"):-5]) for f in snaps)
        flats = []
        for k in range(k_max + 1):
            p = _load_params(run_dir, k)
            flats.append(p.flatten(include_phi=with_nde) if p.phi is not None or not with_nde
                         else np.concatenate([p.flatten(False), np.zeros(n_phi)]))
        coords = trajectory_projection(flats, truth_flat(truth, n_phi), v1, v2)
        write_trajectory(os.path.join(run_dir, "trajectory.csv"), coords)
    return path


# --------------------------------------------------------------------------
# sweeps


def _cell_name(family, noise, ratio, n) -> str:
    return f"{family}_{noise}_R{float(ratio):g}_N{int(n)}"


def sweep_cells(cfg: dict) -> list:
    sw = cfg["sweep"]
    base = int(cfg["seed"])
    cells = []
    for fam in sw["families"]:
        for noise in sw["noises"]:
            for ratio in sw["ratios"]:
                for n in sw["sizes"]:
                    for k in range(int(cfg["seeds"]["n_seeds"])):
                        cells.append((fam, noise, float(ratio), int(n), base + k))
    return cells


def _run_cell(args) -> dict:
    cfg, cell, root = args
    fam, noise, ratio, n, seed = cell
    run_dir = os.path.join(root, _cell_name(fam, noise, ratio, n), f"seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    result_path = os.path.join(run_dir, "result.json")
    row = {"family": fam, "noise": noise, "R": ratio, "N": n, "seed": seed}
    with FileLock(os.path.join(run_dir, ".lock")):
        if os.path.exists(result_path):
            return _read_json(result_path)
        c = copy.deepcopy(cfg)
        c["experiment"].update({"family": fam, "noise": noise, "R": ratio, "N": n})
        c["seed"] = seed
        c["output_dir"] = run_dir
        try:
            validate_config(c)
            cmd_gen_data(c)
            eps = cmd_train(c, os.path.join(run_dir, DATASET_FILE))
            row.update(eps)
            row["success_H"] = is_success(eps["eps_H"])
            row["success_L"] = is_success(eps["eps_L"])
        except Exception as exc:  # logged, the sweep goes on
            log.error("cell %s seed %d failed: %s", _cell_name(fam, noise, ratio, n), seed, exc)
            row.update({"eps_H": float("nan"), "eps_L": float("nan"), "success_H": False, "success_L": False,
                        "error": str(exc)})
            return row
        _write_json(result_path, row)
    return row


def cmd_sweep(cfg: dict, workers: int = 1) -> str:
    """Run or resume every grid cell and aggregate ``success_rates.csv``."""
    root = cfg["output_dir"]
    os.makedirs(root, exist_ok=True)
    cells = sweep_cells(cfg)
    jobs = [(cfg, cell, root) for cell in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    path = os.path.join(root, "success_rates.csv")
    write_success_rates(path, rows)
    _write_json(os.path.join(root, CONFIG_FILE), cfg)
    summary = {}
    for r in rows:
        key = (r["family"], r["noise"], r["R"], r["N"])
        summary.setdefault(key, []).append(bool(r["success_H"]) and bool(r["success_L"]))
    with open(os.path.join(root, "success_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "noise", "R", "N", "n_seeds", "success_fraction"])
        for key, vals in summary.items():
            w.writerow([*key, len(vals), repr(float(np.mean(vals)))])
    return path


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lindbladfit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, workers=False):
        sp.add_argument("--config", help="TOML config (or an emitted config.json)")
        sp.add_argument("--out", help="output or run directory")
        sp.add_argument("--seed", type=int, help="master seed")
        if dataset:
            sp.add_argument("--dataset", help="dataset file")
        if workers:
            sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        return sp

    common(sub.add_parser("gen-data", help="sample ground truth and shot data"))
    common(sub.add_parser("train", help="fit a generator to a dataset"), dataset=True)
    common(sub.add_parser("eval", help="parameter errors and infidelity curve"), dataset=True)
    lp = common(sub.add_parser("landscape", help="loss on a random 2D slice"), dataset=True)
    lp.add_argument("--subspace", help="H, L, HL, NDE, ...")
    lp.add_argument("--epoch", help="init, final or an epoch number")
    lp.add_argument("--radius", type=float)
    lp.add_argument("--grid", type=int)
    common(sub.add_parser("sweep", help="grid of experiments with resumable cells"), workers=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, seed=args.seed, out=args.out)
        if args.command == "landscape":
            ev = cfg["evaluation"]
            for key in ("subspace", "epoch", "radius", "grid"):
                if getattr(args, key) is not None:
                    ev[key] = getattr(args, key)
            validate_config(cfg)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            if not args.dataset:
                raise ConfigError("train needs --dataset")
            cmd_train(cfg, args.dataset)
        elif args.command == "eval":
            cmd_eval(cfg, cfg["output_dir"], args.dataset)
        elif args.command == "landscape":
            cmd_landscape(cfg, cfg["output_dir"], args.dataset)
        elif args.command == "sweep":
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            cmd_sweep(cfg, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
