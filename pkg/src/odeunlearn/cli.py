"""Command-line entry point.

    python3 -m odeunlearn unlearn --seed 0 --out runs/a --set solver=rk4

Configuration is a flat ``key = value`` file (``#`` comments). Precedence is
defaults, then the file, then ``--set`` overrides. Exit codes: 0 success,
1 failed check (gradcheck/theorems), 2 configuration error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import experiments as ex
from .checks import gradcheck_suite, theorem_suite
from .metrics import CSV_COLUMNS
from .toygen import LowRankAdapter, NodeAdapter, WorldConfigError
from .unlearning import UnlearnConfig, write_history
from .vecfield import save_params

SUBCOMMANDS = ("unlearn", "sweep", "ablation", "multi-id", "noise", "gradcheck", "theorems", "report")

# keys outside UnlearnConfig: world recipe and experiment plumbing
WORLD_KEYS = {"world_seed": 0, "k": 8, "latent_dim": 8, "obs_dim": 32, "cluster_std": 0.3}
RUN_KEYS = {"forget_id": 0, "ids": "0,1,2", "n_seeds": 5, "sweep": "step_size"}
SWEEPS = ("step_size", "steps", "hidden_dim", "solver", "lambda_ratio")


class ConfigError(ValueError):
    pass


@dataclass
class CliConfig:
    subcommand: str
    config_path: str | None = None
    overrides: list = field(default_factory=list)
    seed: int | None = None
    out_dir: str = "out"
    jobs: int = 1


@dataclass
class Resolved:
    unlearn: UnlearnConfig
    world: ex.WorldSpec
    run: dict

    def lines(self) -> list[str]:
        out = [f"{k} = {_fmt(getattr(self.unlearn, k))}" for k in UnlearnConfig.keys()]
        out += [f"{k} = {_fmt(v)}" for k, v in zip(WORLD_KEYS, (self.world.seed, self.world.k, self.world.latent_dim, self.world.obs_dim, self.world.cluster_std))]
        out += [f"{k} = {_fmt(self.run[k])}" for k in RUN_KEYS]
        return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _defaults() -> dict:
    vals = {f.name: f.default for f in fields(UnlearnConfig)}
    vals.update(WORLD_KEYS)
    vals.update(RUN_KEYS)
    return vals


def _coerce(key: str, raw: str, template, where: str):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} for {key}") from None
    return raw


def _apply(vals: dict, pairs, source: str) -> None:
    base = _defaults()
    for where, text in pairs:
        if "=" not in text:
            raise ConfigError(f"{source} {where}: expected key=value, got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in base:
            raise ConfigError(f"{source} {where}: unknown key {key!r}")
        vals[key] = _coerce(key, raw, base[key], f"{source} {where}")


def parse_config(path=None, overrides=(), seed: int | None = None) -> Resolved:
    """Resolve defaults <- file <- overrides; ``seed`` (the flag) sets the run seed."""
    vals = _defaults()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                pairs.append((f"line {n}", line))
        _apply(vals, pairs, str(path))
    if seed is not None:
        vals["seed"] = int(seed)
    _apply(vals, [(f"--set {o}", o) for o in overrides], "override")
    try:
        cfg = UnlearnConfig(**{k: vals[k] for k in UnlearnConfig.keys()})
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    world = ex.WorldSpec(vals["world_seed"], vals["k"], vals["latent_dim"], vals["obs_dim"], vals["cluster_std"])
    run = {k: vals[k] for k in RUN_KEYS}
    if run["n_seeds"] < 1:
        raise ConfigError("invalid configuration: n_seeds must be >= 1")
    if run["sweep"] not in SWEEPS:
        raise ConfigError(f"invalid configuration: sweep must be one of {SWEEPS}")
    if not 0 <= run["forget_id"] < world.k:
        raise ConfigError(f"invalid configuration: forget_id must be in [0, {world.k})")
    try:
        ids = tuple(int(s) for s in str(run["ids"]).split(","))
    except ValueError:
        raise ConfigError(f"invalid configuration: ids must be comma-separated integers, got {run['ids']!r}") from None
    if len(ids) not in (2, 3) or len(set(ids)) != len(ids) or not all(0 <= i < world.k for i in ids):
        raise ConfigError("invalid configuration: ids must be 2 or 3 distinct identities")
    return Resolved(cfg, world, run)


def write_adapter(path: Path, adapter) -> None:
    if isinstance(adapter, NodeAdapter):
        save_params(path, adapter.params)
    elif isinstance(adapter, LowRankAdapter):
        dim, rank = adapter.up.shape
        lines = [f"lowrank {dim} {rank}"] + [repr(float(x)) for x in adapter.to_vector()]
        path.write_text("\n".join(lines) + "\n")


# subcommands -------------------------------------------------------------------------


def _seeds(c: CliConfig, r: Resolved) -> tuple:
    return tuple(range(c.seed, c.seed + r.run["n_seeds"]))


def _unlearn(c: CliConfig, r: Resolved, out: Path) -> int:
    world = ex.get_world(r.world)
    stack, history, report, _ = ex.train_and_evaluate(world, r.unlearn, c.seed, r.run["forget_id"])
    write_history(out / "loss_history.csv", history)
    (out / "metrics.csv").write_text(",".join(CSV_COLUMNS) + "\n" + report.csv_row("unlearn", c.seed) + "\n")
    for ad in stack.adapters:
        write_adapter(out / f"adapter_{ad.stage}.params", ad)
    print(f"forget_rate {report.forget_rate:.4f}  retention_accuracy {report.retention_accuracy:.4f}  mmd_retain {report.mmd_retain:.6f}")
    return 0


def _emit(result, out: Path) -> None:
    result.write(out)
    for chk in result.checks:
        print(chk.line())


def _sweep(c: CliConfig, r: Resolved, out: Path) -> int:
    var = r.run["sweep"]
    grid = {
        "step_size": ex.STEP_SIZE_GRID,
        "steps": ex.FIXED_HORIZON_STEPS,
        "hidden_dim": ex.HIDDEN_GRID,
        "solver": ex.SOLVER_GRID,
        "lambda_ratio": ex.LAMBDA_GRID,
    }[var]
    spec = ex.SweepSpec(var, grid, r.unlearn, _seeds(c, r), r.world, r.run["forget_id"])
    run = {
        "step_size": ex.run_step_size_sweep,
        "steps": ex.run_fixed_horizon_sweep,
        "hidden_dim": ex.run_hidden_dim_sweep,
        "solver": ex.run_solver_sweep,
        "lambda_ratio": ex.run_lambda_sweep,
    }[var]
    _emit(run(spec, jobs=c.jobs), out)
    return 0


def _ablation(c, r, out) -> int:
    _emit(ex.run_ablation(r.unlearn, _seeds(c, r), r.world, r.run["forget_id"], jobs=c.jobs), out)
    return 0


def _multi(c, r, out) -> int:
    ids = tuple(int(s) for s in str(r.run["ids"]).split(","))
    _emit(ex.run_multi_identity(r.unlearn, ids, _seeds(c, r), r.world, jobs=c.jobs), out)
    return 0


def _noise(c, r, out) -> int:
    _emit(ex.run_noise_attack(r.unlearn, _seeds(c, r), ex.NOISE_LEVELS, r.world, r.run["forget_id"], jobs=c.jobs), out)
    return 0


def _table(out: Path, name: str, header: str, rows, checks) -> int:
    lines = [header] + [",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
    ex.write_outputs(out, name, lines, checks)
    for chk in checks:
        print(chk.line())
    return 0 if all(chk.passed for chk in checks) else 1


def _gradcheck(c, r, out) -> int:
    rows, checks = gradcheck_suite(c.seed)
    return _table(out, "gradcheck", "check,method,instance,rel_err", rows, checks)


def _theorems(c, r, out) -> int:
    if r.unlearn.adapter != "node":
        raise ConfigError("theorems needs adapter=node")
    rows, checks = theorem_suite(c.seed, r.world, r.unlearn)
    rows = [tuple(row) + ("",) * (5 - len(row)) for row in rows]
    return _table(out, "theorems", "check,case,a,b,c", rows, checks)


def _report(c, r, out) -> int:
    """Collect every summary in the output directory into ``report.txt``."""
    parts = []
    for path in sorted(out.glob("*.summary.txt")):
        parts.append(f"[{path.name[: -len('.summary.txt')]}]\n{path.read_text()}")
    text = "\n".join(parts) if parts else "no summaries found\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


HANDLERS = {
    "unlearn": _unlearn,
    "sweep": _sweep,
    "ablation": _ablation,
    "multi-id": _multi,
    "noise": _noise,
    "gradcheck": _gradcheck,
    "theorems": _theorems,
    "report": _report,
}


def dispatch(c: CliConfig) -> int:
    try:
        resolved = parse_config(c.config_path, c.overrides, c.seed)
        c.seed = resolved.unlearn.seed
        if c.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(c.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text("\n".join(resolved.lines()) + "\n")
        return HANDLERS[c.subcommand](c, resolved, out)
    except (ConfigError, WorldConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="odeunlearn", description="Continuous-time identity unlearning in a toy generator.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", dest="config_path", metavar="PATH")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seed", type=int, default=None, help="run seed (default: config value, else 0)")
    ap.add_argument("--out", dest="out_dir", default="out", metavar="DIR")
    ap.add_argument("--jobs", type=int, default=1, metavar="N")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    return dispatch(CliConfig(**vars(ns)))


if __name__ == "__main__":
    sys.exit(main())
