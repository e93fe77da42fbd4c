"""Command-line front end: solve, generate, train, reproduce.

Exit codes: 0 success, 1 input error, 2 numerical or convergence failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergenceDetected, GameError, QreError, SolverError
from .game_model import NormalFormGame, game_from_dict
from .learning import (
    MASKS,
    OptimizerConfig,
    generate_dataset,
    read_jsonl,
    train,
    write_jsonl,
)
from .param_games import GameFamily, make_family, rps_payoff
from .qre_normal import SolverOptions
from .qre_sequence import solve_game

log = logging.getLogger("qreforge")

METRIC_FIELDS = ("epoch", "train_loss", "test_loss", "param_mse", "strategy_mse")
SUMMARY_FIELDS = ("size", "param_mse_mean", "param_mse_se", "strategy_mse_mean", "strategy_mse_se")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

DESK = {"epochs": 150, "lr": 0.01, "lr_decay": 0.98, "test_size": 500}
FULL = {"epochs": 2500, "lr": 0.002, "lr_decay": 1.0, "test_size": 2000}
SEEDS = {"rps": 5, "poker": 5, "security": 10}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    family: str = "rps"
    family_args: dict = field(default_factory=dict)
    truth: list | None = None  # interpretable values; drawn from the seed when absent
    mask: str | None = None
    sizes: tuple = (200, 2000, 5000)
    seed: int = 0
    seeds: int | None = None
    test_size: int | None = None
    objective: str = "sampled"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    stages: tuple = (1,)

    def make_family(self, **override) -> GameFamily:
        return make_family(self.family, **{**self.family_args, **override})


# -- config parsing ----------------------------------------------------------------

_FAMILY_KEYS = ("n", "k", "t")
_OPT_KEYS = {f: type(getattr(OptimizerConfig(), f)) for f in OptimizerConfig.__dataclass_fields__}
_SOLVER_KEYS = {f: type(getattr(SolverOptions(), f)) for f in SolverOptions.__dataclass_fields__}


def _numbers(value, cast=float):
    if isinstance(value, str):
        value = [x for x in value.replace(",", " ").split() if x]
    if not isinstance(value, (list, tuple)):
        value = [value]
    return [cast(x) for x in value]


def _read_config(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        sections = {k: v for k, v in data.items() if isinstance(v, dict)}
        sections.setdefault("experiment", {}).update(
            {k: v for k, v in data.items() if not isinstance(v, dict)})
        return sections
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    return {s: dict(parser[s]) for s in parser.sections()}


def load_config(path=None, full: bool = False, family: str | None = None) -> ExperimentConfig:
    try:
        sections = _read_config(path) if path else {}
    except (OSError, json.JSONDecodeError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(sections) - {"experiment", "optimizer", "solver"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    exp = dict(sections.get("experiment", {}))
    scale = FULL if full else DESK
    try:
        cfg = ExperimentConfig(family=str(exp.pop("family", family or "rps")))
        cfg.family_args = {k: int(exp.pop(k)) for k in _FAMILY_KEYS if k in exp}
        if "truth" in exp:
            cfg.truth = _numbers(exp.pop("truth"))
        cfg.mask = exp.pop("mask", None)
        if "sizes" in exp:
            cfg.sizes = tuple(_numbers(exp.pop("sizes"), int))
        cfg.seed = int(exp.pop("seed", 0))
        if "seeds" in exp:
            cfg.seeds = int(exp.pop("seeds"))
        cfg.test_size = int(exp.pop("test_size", scale["test_size"]))
        cfg.objective = str(exp.pop("objective", "sampled"))
        if "stages" in exp:
            cfg.stages = tuple(_numbers(exp.pop("stages"), int))
        if exp:
            raise ConfigError(f"unknown experiment keys: {sorted(exp)}")
        opt = {"epochs": scale["epochs"], "lr": scale["lr"], "lr_decay": scale["lr_decay"]}
        for k, v in sections.get("optimizer", {}).items():
            if k not in _OPT_KEYS:
                raise ConfigError(f"unknown optimizer key {k!r}")
            opt[k] = _OPT_KEYS[k](v)
        cfg.optimizer = OptimizerConfig(**opt)
        sol = {}
        for k, v in sections.get("solver", {}).items():
            if k not in _SOLVER_KEYS:
                raise ConfigError(f"unknown solver key {k!r}")
            sol[k] = _SOLVER_KEYS[k](v)
        cfg.solver = SolverOptions(**sol)
        family_obj = cfg.make_family()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc
    if cfg.mask is None:
        cfg.mask = family_obj.default_mask
    if cfg.mask not in MASKS:
        raise ConfigError(f"mask must be one of {MASKS}, not {cfg.mask!r}")
    if cfg.objective not in ("sampled", "expected"):
        raise ConfigError("objective must be 'sampled' or 'expected'")
    if any(s < 0 for s in cfg.sizes):
        raise ConfigError("dataset sizes must be non-negative")
    if cfg.truth is not None and len(cfg.truth) != family_obj.num_params:
        raise ConfigError(f"{cfg.family} truth needs {family_obj.num_params} values")
    return cfg


# -- shared helpers ----------------------------------------------------------------

def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _truth(cfg: ExperimentConfig, family: GameFamily, seed: int) -> np.ndarray:
    if cfg.truth is not None:
        return family.raw_from_interpretable(cfg.truth)
    return family.draw_truth(_rng(seed, 0))


def _test_contexts(cfg: ExperimentConfig, family: GameFamily, seed: int):
    if not family.contextual:
        return None
    return family.draw_contexts(_rng(seed, 1), cfg.test_size)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# -- solve -------------------------------------------------------------------------

def _game_from_spec(spec: dict):
    if "family" not in spec:
        return game_from_dict(spec)
    name = spec["family"]
    if name == "rps" and "b" in spec:
        return NormalFormGame(rps_payoff(spec["b"]))
    family = make_family(name, **{k: spec[k] for k in _FAMILY_KEYS if k in spec})
    if "params" in spec:
        theta = np.asarray(spec["params"], dtype=float)
    elif "values" in spec:
        theta = family.raw_from_interpretable(spec["values"])
    else:
        raise ConfigError(f"{name} spec needs 'params' or 'values'")
    return family.build(theta, spec.get("context"))


def cmd_solve(args) -> int:
    spec = json.loads(Path(args.game).read_text())
    sol = solve_game(_game_from_spec(spec), args.solver)
    out = {"u": sol.u.tolist(), "v": sol.v.tolist(),
           "residual": sol.residual, "iterations": sol.iterations}
    print(json.dumps(out))
    return EXIT_OK


# -- generate ----------------------------------------------------------------------

def generate(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    family = cfg.make_family()
    truth = _truth(cfg, family, seed)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for size in cfg.sizes:
        records = generate_dataset(family, truth, size, cfg.mask, _rng(seed, 2, size), cfg.solver)
        name = f"data_{size}.jsonl"
        write_jsonl(records, out / name)
        files[str(size)] = name
    contexts = _test_contexts(cfg, family, seed)
    manifest = {
        **family.config(),
        "seed": seed,
        "mask": cfg.mask,
        "sizes": list(cfg.sizes),
        "files": files,
        "truth_params": truth.tolist(),
        "truth": family.interpretable(truth).tolist(),
        "test_contexts": None if contexts is None else contexts.tolist(),
    }
    _dump(manifest, out / "manifest.json")
    return manifest


def cmd_generate(args) -> int:
    cfg = args.cfg
    seed = cfg.seed if args.seed is None else args.seed
    generate(cfg, Path(args.out), seed)
    return EXIT_OK


# -- train -------------------------------------------------------------------------

def run_training(cfg: ExperimentConfig, records, manifest: dict, out: Path, seed: int,
                 family: GameFamily | None = None):
    """Train and stream metrics to ``out/metrics.csv``; writes ``params.json``."""
    family = family or cfg.make_family()
    truth = np.asarray(manifest["truth_params"], dtype=float)
    contexts = manifest.get("test_contexts")
    contexts = None if contexts is None else np.asarray(contexts, dtype=float)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)

        def on_epoch(row):
            writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
            fh.flush()

        try:
            result = train(family, family.initial_params(), records, cfg.optimizer,
                           truth_params=truth, test_contexts=contexts, objective=cfg.objective,
                           seed=seed, solver_opts=cfg.solver, on_epoch=on_epoch)
        except DivergenceDetected as exc:
            _write_params(family, exc.result, out, diverged=True)
            raise
    _write_params(family, result, out)
    return result


def _write_params(family, result, out: Path, diverged: bool = False) -> None:
    _dump({
        **family.config(),
        "final_params": result.params.tolist(),
        "final": family.interpretable(result.params).tolist(),
        "best_params": result.best_params.tolist(),
        "best": family.interpretable(result.best_params).tolist(),
        "epochs": len(result.metrics) - 1,
        "diverged": diverged,
    }, out / "params.json")


def cmd_train(args) -> int:
    cfg = args.cfg
    data = Path(args.data)
    manifest_path = Path(args.manifest) if args.manifest else data.parent / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from exc
    for k in _FAMILY_KEYS + ("family",):
        if k in manifest and manifest[k] != cfg.make_family().config().get(k, manifest[k]):
            raise ConfigError(f"dataset was generated for {k}={manifest[k]!r}")
    records = read_jsonl(data)
    if not records:
        raise ConfigError(f"dataset {data} is empty")
    seed = cfg.seed if args.seed is None else args.seed
    run_training(cfg, records, manifest, Path(args.out), seed)
    return EXIT_OK


# -- reproduce ---------------------------------------------------------------------

def _cell(cfg: ExperimentConfig, t: int, size: int, rep: int, out: Path) -> dict:
    """One grid cell: generate a dataset for seed ``rep`` and train on it."""
    over = {"t": t} if cfg.family == "security" else {}
    family = cfg.make_family(**over)
    seed = cfg.seed * 1000 + rep
    truth = _truth(cfg, family, seed)
    records = generate_dataset(family, truth, size, cfg.mask, _rng(seed, 2, size), cfg.solver)
    contexts = _test_contexts(cfg, family, seed)
    manifest = {"truth_params": truth.tolist(),
                "test_contexts": None if contexts is None else contexts.tolist()}
    result = run_training(cfg, records, manifest, out, seed, family)
    last = result.metrics[-1]
    return {"t": t, "size": size, "seed": rep,
            "param_mse": last["param_mse"], "strategy_mse": last["strategy_mse"]}


def _run_cell(job):
    cfg, t, size, rep, out = job
    logging.basicConfig(level=_log_level())
    try:
        return _cell(cfg, t, size, rep, out)
    except (QreError, ValueError) as exc:
        return {"t": t, "size": size, "seed": rep, "error": f"{type(exc).__name__}: {exc}"}


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


def summarize(rows: list[dict], with_t: bool) -> list[list]:
    table = []
    keys = sorted({(r["t"], r["size"]) for r in rows})
    for t, size in keys:
        ok = [r for r in rows if r["t"] == t and r["size"] == size and "error" not in r]
        pm, ps = _mean_se([r["param_mse"] for r in ok])
        sm, ss = _mean_se([r["strategy_mse"] for r in ok])
        table.append(([t] if with_t else []) + [size, pm, ps, sm, ss])
    return table


def reproduce(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> tuple[list[dict], Path]:
    with_t = cfg.family == "security"
    stages = cfg.stages if with_t else (1,)
    seeds = cfg.seeds or SEEDS[cfg.family]
    grid = [(cfg, t, size, rep, out / "cells" / f"t{t}_n{size}_s{rep}")
            for t in stages for size in cfg.sizes for rep in range(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, grid))
    else:
        rows = [_run_cell(job) for job in grid]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "size", "seed", "param_mse", "strategy_mse", "error"))
        for r in rows:
            w.writerow([r["t"], r["size"], r["seed"], _fmt(r.get("param_mse", "")),
                        _fmt(r.get("strategy_mse", "")), r.get("error", "")])
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((("t",) if with_t else ()) + SUMMARY_FIELDS)
        for row in summarize(rows, with_t):
            w.writerow([_fmt(x) for x in row])
    return rows, path


def cmd_reproduce(args) -> int:
    cfg = args.cfg
    if cfg.family != args.experiment:
        cfg = replace(cfg, family=args.experiment, family_args={}, truth=None,
                      mask=make_family(args.experiment).default_mask)
    if args.experiment == "security" and not args.config:
        cfg.stages = (1, 2)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sizes:
        cfg.sizes = tuple(args.sizes)
    if args.seeds:
        cfg.seeds = args.seeds
    rows, path = reproduce(cfg, Path(args.out), args.jobs)
    failed = [r for r in rows if "error" in r]
    for r in failed:
        print(f"cell t={r['t']} size={r['size']} seed={r['seed']} failed: {r['error']}",
              file=sys.stderr)
    print(path.read_text(), end="")
    return EXIT_NUMERIC if failed else EXIT_OK


# -- entry point -------------------------------------------------------------------

def _log_level() -> int:
    level = getattr(logging, os.environ.get("QREFORGE_LOG", "WARNING").upper(), None)
    return level if isinstance(level, int) else logging.WARNING


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI or JSON experiment config")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--full", action="store_true", help="full-length training settings")
    common.add_argument("--jobs", type=int, default=1, help="parallel grid cells")

    p = argparse.ArgumentParser(prog="qreforge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="solve one game, print JSON")
    s.add_argument("game", help="game JSON file or family spec")
    s.set_defaults(func=cmd_solve)
    g = sub.add_parser("generate", parents=[common], help="sample observed-play datasets")
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common], help="fit parameters to a dataset")
    t.add_argument("data", help="JSONL dataset")
    t.add_argument("--manifest", help="manifest JSON (default: next to the dataset)")
    t.set_defaults(func=cmd_train)
    r = sub.add_parser("reproduce", parents=[common], help="run an experiment grid")
    r.add_argument("experiment", choices=("rps", "poker", "security"))
    r.add_argument("--sizes", type=int, nargs="+", help="override dataset sizes")
    r.add_argument("--seeds", type=int, help="override the number of seeds")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=_log_level(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.cfg = load_config(args.config, args.full,
                               getattr(args, "experiment", None))
        args.solver = args.cfg.solver
        return args.func(args)
    except SolverError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DivergenceDetected as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GameError, ConfigError, QreError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
