"""Experiment protocols: sweeps, ablation, multi-identity, noise attack.

Every run is a pure function of (world seed, config, run seed), so grid
points can run in any order or in parallel; rows are sorted before writing.
Each protocol returns rows plus a list of ordering checks and can write
``<name>.csv`` and ``<name>.summary.txt``.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import CSV_COLUMNS, MetricReport, check_trajectory_noncrossing, evaluate, forget_rate
from .numkit import make_rng
from .toygen import ToyWorld, build_toy_world, generate, sample_identity
from .unlearning import UnlearnConfig, run_unlearning

__all__ = [
    "MMD_SCALE",
    "MMD_RETAIN_THRESHOLD",
    "DEFAULT_SEEDS",
    "STEP_SIZE_GRID",
    "FIXED_HORIZON_STEPS",
    "HIDDEN_GRID",
    "SOLVER_GRID",
    "LAMBDA_GRID",
    "NOISE_LEVELS",
    "SweepSpec",
    "RunRecord",
    "Check",
    "SweepResult",
    "composite_j",
    "WorldSpec",
    "get_world",
    "train_and_evaluate",
    "run_sweep",
    "run_step_size_sweep",
    "run_fixed_horizon_sweep",
    "run_hidden_dim_sweep",
    "run_solver_sweep",
    "run_lambda_sweep",
    "run_ablation",
    "run_multi_identity",
    "run_noise_attack",
]

# median mmd_retain of the default config over pilot seeds 100..104,
# fixed before any reported run; the retention bar is 2.5x that median
MMD_SCALE = 0.003946694489997626
MMD_RETAIN_THRESHOLD = 0.01
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
EVAL_OFFSET = 10_000
N_EVAL = 100
N_EVAL_NOISE = 500  # noise deltas are small; finer forget/retention resolution
N_MMD = 200  # matches the pilot that fixed MMD_SCALE

STEP_SIZE_GRID = (0.1, 0.2, 0.4, 0.6, 1.0)
FIXED_HORIZON_STEPS = (1, 2, 4, 8)  # at T = 1.6: dt 1.6, 0.8, 0.4, 0.2
HIDDEN_GRID = (8, 16, 32, 64)
SOLVER_GRID = ("euler", "rk4", "midpoint")
LAMBDA_GRID = ((1.0, 1.0, 1.0), (1.0, 1.0, 0.5), (0.5, 1.0, 1.0), (1.0, 0.5, 1.0))
NOISE_LEVELS = (0.0, 0.1, 0.3, 1.0)  # multiples of the world's cluster_std

VARIABLES = ("step_size", "steps", "hidden_dim", "solver", "lambda_ratio", "noise_std")


def composite_j(report: MetricReport, scale: float = MMD_SCALE) -> float:
    return report.forget_rate + report.mmd_retain / scale


@dataclass(frozen=True)
class WorldSpec:
    """Seeded world recipe; worlds are rebuilt from it, never stored."""

    seed: int = 0
    k: int = 8
    latent_dim: int = 8
    obs_dim: int = 32
    cluster_std: float = 0.3


@lru_cache(maxsize=8)
def _build(spec: WorldSpec) -> ToyWorld:
    return build_toy_world(spec.seed, k=spec.k, latent_dim=spec.latent_dim, obs_dim=spec.obs_dim, cluster_std=spec.cluster_std)


def get_world(spec: WorldSpec | int = 0) -> ToyWorld:
    return _build(spec if isinstance(spec, WorldSpec) else WorldSpec(seed=int(spec)))


def _label(value) -> str:
    if isinstance(value, tuple):
        return ":".join(f"{v:g}" for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    fixed: UnlearnConfig = field(default_factory=UnlearnConfig)
    seeds: tuple = DEFAULT_SEEDS
    world_spec: WorldSpec | int = 0
    forget_id: int = 0

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r}; choose from {VARIABLES}")
        if len(self.values) == 0:
            raise ValueError("sweep values must be non-empty")
        if len(self.seeds) == 0:
            raise ValueError("need at least one seed")
        for v in self.values:
            self.config_for(v)

    def config_for(self, value) -> UnlearnConfig:
        c = self.fixed
        if self.variable == "step_size":
            return c.with_(step_size=float(value))
        if self.variable == "steps":
            # horizon held at the fixed config's value
            return c.with_(steps=int(value), step_size=c.solver_spec.horizon / int(value))
        if self.variable == "hidden_dim":
            return c.with_(hidden=int(value))
        if self.variable == "solver":
            return c.with_(solver=str(value))
        if self.variable == "lambda_ratio":
            lu, ltc, lr = value
            return c.with_(lambda_u=float(lu), lambda_tc=float(ltc), lambda_r=float(lr))
        return c

    def noise_for(self, value) -> float:
        return float(value) if self.variable == "noise_std" else 0.0


@dataclass(frozen=True)
class RunRecord:
    label: str
    seed: int
    cfg: UnlearnConfig
    report: MetricReport

    @property
    def j(self) -> float:
        return composite_j(self.report)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class SweepResult:
    name: str
    variable: str
    labels: list  # grid order
    records: list
    checks: list = field(default_factory=list)

    def by_label(self, label: str) -> list:
        return [r for r in self.records if r.label == label]

    def stat(self, label: str, attr: str = "j") -> tuple[float, float]:
        """Mean and standard error over seeds."""
        vals = np.array([r.j if attr == "j" else getattr(r.report, attr) for r in self.by_label(label)])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        return float(vals.mean()), se

    def csv_lines(self) -> list[str]:
        head = ["experiment", "variable", "value", "solver", "steps", "step_size", "horizon", "hidden"]
        head += ["lambda_u", "lambda_tc", "lambda_r"] + list(CSV_COLUMNS[1:]) + ["J"]
        lines = [",".join(head)]
        order = {lab: i for i, lab in enumerate(self.labels)}
        for r in sorted(self.records, key=lambda r: (order[r.label], r.seed)):
            c = r.cfg
            row = [self.name, self.variable, r.label, c.solver, str(c.steps), repr(c.step_size), repr(c.solver_spec.horizon), str(c.hidden)]
            row += [repr(c.lambda_u), repr(c.lambda_tc), repr(c.lambda_r)]
            row.append(r.report.csv_row(r.label, r.seed).split(",", 1)[1])
            row.append(repr(r.j))
            lines.append(",".join(row))
        return lines

    def write(self, out_dir) -> tuple[Path, Path]:
        return write_outputs(out_dir, self.name, self.csv_lines(), self.checks)


def write_outputs(out_dir, name: str, csv_lines: Sequence[str], checks: Sequence[Check]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n")
    summary = out / f"{name}.summary.txt"
    summary.write_text("".join(c.line() + "\n" for c in checks))
    return csv_path, summary


# running -------------------------------------------------------------------


def _map(fn, tasks, jobs: int = 1) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def train_and_evaluate(world: ToyWorld, cfg: UnlearnConfig, seed: int, forget_id: int = 0, noise_std: float = 0.0):
    """One full run. Returns ``(stack, history, report, source)``."""
    rng = make_rng(seed)
    w_u = sample_identity(world, rng, forget_id)
    stack, history = run_unlearning(world, w_u, cfg.with_(seed=seed), rng=rng)
    report = evaluate(world, stack, [forget_id], make_rng(EVAL_OFFSET + seed), sources=w_u, n_per_id=N_EVAL, n_mmd=N_MMD, noise_std=noise_std)
    return stack, history, report, w_u


def _sweep_task(task) -> RunRecord:
    label, cfg, seed, world_spec, forget_id, noise = task
    _, _, report, _ = train_and_evaluate(get_world(world_spec), cfg, seed, forget_id, noise)
    return RunRecord(label, seed, cfg, report)


def run_sweep(spec: SweepSpec, name: str | None = None, jobs: int = 1) -> SweepResult:
    labels = [_label(v) for v in spec.values]
    tasks = [
        (lab, spec.config_for(v), s, spec.world_spec, spec.forget_id, spec.noise_for(v) * get_world(spec.world_spec).cluster_std)
        for (lab, v), s in itertools.product(zip(labels, spec.values), spec.seeds)
    ]
    records = _map(_sweep_task, tasks, jobs)
    return SweepResult(name or f"{spec.variable}_sweep", spec.variable, labels, records)


def _pooled_se(res: SweepResult, a: str, b: str, attr: str = "j") -> float:
    return math.hypot(res.stat(a, attr)[1], res.stat(b, attr)[1])


def _interior_check(res: SweepResult, name: str) -> Check:
    """Best interior mean J beats both extremes by at least one pooled standard error."""
    labels = res.labels
    if len(labels) < 3:
        return Check(name, False, "needs at least three grid points")
    best = min(labels[1:-1], key=lambda lab: res.stat(lab)[0])
    jb = res.stat(best)[0]
    parts, ok = [f"best interior {best} J={jb:.4f}"], True
    for ext in (labels[0], labels[-1]):
        je = res.stat(ext)[0]
        se = _pooled_se(res, best, ext)
        ok &= je - jb >= se
        parts.append(f"{ext} J={je:.4f} (gap {je - jb:.4f}, pooled SE {se:.4f})")
    return Check(name, bool(ok), "; ".join(parts))


def _mean(res, lab, attr="j"):
    return res.stat(lab, attr)[0]


def run_step_size_sweep(spec: SweepSpec | None = None, jobs: int = 1) -> SweepResult:
    """Steps fixed at 4 while dt varies; checks the interior-optimum shape."""
    spec = spec or SweepSpec("step_size", STEP_SIZE_GRID)
    if spec.variable != "step_size":
        raise ValueError("step-size sweep needs variable='step_size'")
    res = run_sweep(spec, "step_size_sweep", jobs)
    res.checks.append(_interior_check(res, "interior_optimum"))
    mmds = {lab: _mean(res, lab, "mmd_retain") for lab in res.labels}
    worst = max(mmds, key=mmds.get)
    res.checks.append(Check("retention_worst_at_largest_dt", worst == res.labels[-1], f"worst mmd_retain at dt={worst} ({mmds[worst]:.5f})"))
    if "0.4" in mmds and "0.1" in mmds:
        res.checks.append(Check("retention_0.4_better_than_0.1", mmds["0.4"] < mmds["0.1"], f"mmd 0.4={mmds['0.4']:.5f} vs 0.1={mmds['0.1']:.5f}"))
    return res


def run_fixed_horizon_sweep(spec: SweepSpec | None = None, jobs: int = 1) -> SweepResult:
    """Horizon fixed at the base config's steps * dt while the step count varies."""
    spec = spec or SweepSpec("steps", FIXED_HORIZON_STEPS)
    if spec.variable != "steps":
        raise ValueError("fixed-horizon sweep needs variable='steps'")
    res = run_sweep(spec, "fixed_horizon_sweep", jobs)
    res.checks.append(_interior_check(res, "interior_optimum"))
    best = min(res.labels, key=lambda lab: _mean(res, lab))
    res.checks.append(Check("best_at_4_steps", best == "4", f"lowest mean J at steps={best}"))
    return res


def run_hidden_dim_sweep(spec: SweepSpec | None = None, jobs: int = 1) -> SweepResult:
    spec = spec or SweepSpec("hidden_dim", HIDDEN_GRID)
    res = run_sweep(spec, "hidden_dim_sweep", jobs)
    for lab in res.labels:
        m, se = res.stat(lab)
        res.checks.append(Check(f"hidden_{lab}", True, f"J={m:.4f} +- {se:.4f}"))
    return res


def run_solver_sweep(spec: SweepSpec | None = None, jobs: int = 1) -> SweepResult:
    spec = spec or SweepSpec("solver", SOLVER_GRID)
    res = run_sweep(spec, "solver_sweep", jobs)
    for lab in res.labels:
        m, se = res.stat(lab)
        res.checks.append(Check(f"solver_{lab}", True, f"J={m:.4f} +- {se:.4f}"))
    return res


def run_lambda_sweep(spec: SweepSpec | None = None, jobs: int = 1) -> SweepResult:
    spec = spec or SweepSpec("lambda_ratio", LAMBDA_GRID)
    res = run_sweep(spec, "lambda_sweep", jobs)
    if "1:1:1" in res.labels and "1:1:0.5" in res.labels:
        a, b = _mean(res, "1:1:1", "mmd_retain"), _mean(res, "1:1:0.5", "mmd_retain")
        res.checks.append(Check("lower_retain_weight_worsens_mmd", b > a, f"mmd 1:1:0.5={b:.5f} vs 1:1:1={a:.5f}"))
    return res


# ablation -------------------------------------------------------------------

ABLATION_VARIANTS = ("discrete", "node", "node+tc")


def _variant_cfg(cfg: UnlearnConfig, variant: str) -> UnlearnConfig:
    if variant == "discrete":
        return cfg.with_(adapter="discrete", lambda_tc=0.0)
    if variant == "node":
        return cfg.with_(adapter="node", lambda_tc=0.0)
    return cfg.with_(adapter="node")


def run_ablation(cfg: UnlearnConfig | None = None, seeds=DEFAULT_SEEDS, world_spec: WorldSpec | int = 0, forget_id: int = 0, jobs: int = 1) -> SweepResult:
    """Discrete baseline vs Neural ODE without and with trajectory consistency."""
    cfg = cfg or UnlearnConfig()
    tasks = [(v, _variant_cfg(cfg, v), s, world_spec, forget_id, 0.0) for v, s in itertools.product(ABLATION_VARIANTS, seeds)]
    res = SweepResult("ablation", "variant", list(ABLATION_VARIANTS), _map(_sweep_task, tasks, jobs))
    m = {v: _mean(res, v, "mmd_retain") for v in ABLATION_VARIANTS}
    res.checks.append(Check("tc_beats_node_only", m["node+tc"] < m["node"], f"mmd node+tc={m['node+tc']:.5f} vs node={m['node']:.5f}"))
    res.checks.append(Check("node_beats_discrete", m["node"] < m["discrete"], f"mmd node={m['node']:.5f} vs discrete={m['discrete']:.5f}"))
    se = _pooled_se(res, "node+tc", "discrete", "mmd_retain")
    gap = m["discrete"] - m["node+tc"]
    res.checks.append(Check("tc_vs_discrete_separated", gap >= se, f"gap {gap:.5f}, pooled SE {se:.5f}"))
    fr = {v: _mean(res, v, "forget_rate") for v in ABLATION_VARIANTS}
    res.checks.append(Check("all_forget", all(f <= 0.3 for f in fr.values()), ", ".join(f"{v}={f:.3f}" for v, f in fr.items())))
    return res


# multi-identity ------------------------------------------------------------------


def _retain_drift(world: ToyWorld, stack, retain_ids, rng, n: int) -> float:
    """Mean distance between adapted and frozen outputs on retained identities."""
    w = np.vstack([sample_identity(world, rng, i, n) for i in retain_ids])
    return float(np.mean(np.linalg.norm(generate(world, stack, w) - generate(world, None, w), axis=1)))


def _multi_task(task):
    cfg, seed, world_spec, ids = task
    world = get_world(world_spec)
    rng = make_rng(seed)
    stack, rows = None, []
    for j, ident in enumerate(ids):
        w_u = sample_identity(world, rng, ident)
        stack, _ = run_unlearning(world, w_u, cfg.with_(seed=seed), stack=stack, rng=rng)
        done = list(ids[: j + 1])
        erng = make_rng(EVAL_OFFSET + seed)
        report = evaluate(world, stack, done, erng, n_per_id=N_EVAL, n_mmd=N_MMD)
        per_id = [forget_rate(world, stack, erng, N_EVAL, [i]) for i in done]
        retain_ids = [i for i in range(world.k) if i not in ids]
        drift = _retain_drift(world, stack, retain_ids, erng, N_EVAL)
        crossings = []
        for a, b in itertools.combinations(done, 2):
            nc = check_trajectory_noncrossing(world, stack, a, b, erng, n_pairs=100)
            crossings.append((a, b, nc.passed, nc.min_ratio))
        rows.append((j + 1, report, per_id, drift, crossings))
    return seed, rows


@dataclass
class MultiIdentityResult:
    ids: tuple
    runs: list  # (seed, rows) per seed
    checks: list = field(default_factory=list)
    name: str = "multi_identity"

    def csv_lines(self) -> list[str]:
        lines = ["count,seed,per_id_forget_rate,drift,noncrossing_min_ratio," + ",".join(CSV_COLUMNS[2:])]
        for seed, rows in sorted(self.runs, key=lambda r: r[0]):
            for count, rep, per_id, drift, crossings in rows:
                ratio = min((c[3] for c in crossings), default=float("nan"))
                per = ";".join(repr(float(f)) for f in per_id)
                metr = rep.csv_row("", seed).split(",", 2)[2]
                lines.append(f"{count},{seed},{per},{drift!r},{ratio!r},{metr}")
        return lines

    def write(self, out_dir):
        return write_outputs(out_dir, self.name, self.csv_lines(), self.checks)


def run_multi_identity(cfg: UnlearnConfig | None = None, ids: Sequence[int] = (0, 1, 2), seeds=DEFAULT_SEEDS, world_spec: WorldSpec | int = 0, jobs: int = 1) -> MultiIdentityResult:
    """Sequential unlearning of several identities with retention and non-crossing checks.

    The first stage of each sequence is the single-identity reference.
    """
    cfg = cfg or UnlearnConfig()
    ids = tuple(ids)
    if len(ids) not in (2, 3) or len(set(ids)) != len(ids):
        raise ValueError("need 2 or 3 distinct identities")
    runs = _map(_multi_task, [(cfg, s, world_spec, ids) for s in seeds], jobs)
    res = MultiIdentityResult(ids, runs)
    last = {count: [rows[count - 1] for _, rows in runs] for count in range(1, len(ids) + 1)}
    single_mmd = np.mean([r[1].mmd_retain for r in last[1]])
    single_drift = np.mean([r[3] for r in last[1]])
    for count in range(2, len(ids) + 1):
        rows = last[count]
        fr = np.mean([r[2] for r in rows], axis=0)
        res.checks.append(Check(f"forget_all_{count}", bool(np.all(fr <= 0.3)), "mean per-id forget_rate " + ", ".join(f"{f:.3f}" for f in fr)))
        mm = np.mean([r[1].mmd_retain for r in rows])
        res.checks.append(Check(f"mmd_within_2x_{count}", mm <= 2 * single_mmd, f"mmd {mm:.5f} vs single {single_mmd:.5f}"))
        dr = np.mean([r[3] for r in rows])
        res.checks.append(Check(f"drift_within_1.5x_{count}", dr <= 1.5 * single_drift, f"drift {dr:.5f} vs single {single_drift:.5f}"))
        ok = all(c[2] for r in rows for c in r[4])
        worst = min(c[3] for r in rows for c in r[4])
        res.checks.append(Check(f"noncrossing_{count}", ok, f"min distance ratio {worst:.4f}"))
    return res


# noise attack --------------------------------------------------------------------


def _noise_task(task):
    cfg, seed, world_spec, forget_id, levels = task
    world = get_world(world_spec)
    out = []
    for variant in ("node", "discrete"):
        vcfg = cfg.with_(adapter=variant)
        stack, _, _, w_u = train_and_evaluate(world, vcfg, seed, forget_id)
        for lvl in levels:
            rep = evaluate(world, stack, [forget_id], make_rng(EVAL_OFFSET + seed), sources=w_u, n_per_id=N_EVAL_NOISE, n_mmd=N_MMD, noise_std=lvl * world.cluster_std)
            out.append((variant, lvl, seed, rep))
    return out


@dataclass
class NoiseAttackResult:
    levels: tuple
    rows: list  # (variant, level, seed, report)
    checks: list = field(default_factory=list)
    name: str = "noise_attack"

    def mean(self, variant: str, level: float, attr: str) -> float:
        return float(np.mean([getattr(r[3], attr) for r in self.rows if r[0] == variant and r[1] == level]))

    def csv_lines(self) -> list[str]:
        lines = ["variant,noise_multiplier," + ",".join(CSV_COLUMNS[1:])]
        order = {"node": 0, "discrete": 1}
        for v, lvl, seed, rep in sorted(self.rows, key=lambda r: (order[r[0]], r[1], r[2])):
            lines.append(f"{v},{lvl!r}," + rep.csv_row("", seed).split(",", 1)[1])
        return lines

    def write(self, out_dir):
        return write_outputs(out_dir, self.name, self.csv_lines(), self.checks)


def run_noise_attack(cfg: UnlearnConfig | None = None, seeds=DEFAULT_SEEDS, levels=NOISE_LEVELS, world_spec: WorldSpec | int = 0, forget_id: int = 0, jobs: int = 1) -> NoiseAttackResult:
    """Train both adapter kinds per seed and evaluate under perturbed test latents.

    Degradation is measured against each adapter's own noiseless row.
    """
    cfg = cfg or UnlearnConfig()
    chunks = _map(_noise_task, [(cfg, s, world_spec, forget_id, tuple(levels)) for s in seeds], jobs)
    res = NoiseAttackResult(tuple(levels), [r for c in chunks for r in c])
    base = levels[0]
    for lvl in levels[1:]:
        deg = {}
        for v in ("node", "discrete"):
            deg[v] = (
                res.mean(v, lvl, "forget_rate") - res.mean(v, base, "forget_rate"),
                res.mean(v, base, "retention_accuracy") - res.mean(v, lvl, "retention_accuracy"),
            )
        res.checks.append(Check(f"forget_degradation_{lvl:g}", deg["node"][0] <= deg["discrete"][0], f"node {deg['node'][0]:+.4f} vs discrete {deg['discrete'][0]:+.4f}"))
        res.checks.append(Check(f"retention_degradation_{lvl:g}", deg["node"][1] <= deg["discrete"][1], f"node {deg['node'][1]:+.4f} vs discrete {deg['discrete'][1]:+.4f}"))
    # informational: level ordering between the adapters at matched noise
    for lvl in levels:
        fn, fd = res.mean("node", lvl, "forget_rate"), res.mean("discrete", lvl, "forget_rate")
        rn, rd = res.mean("node", lvl, "retention_accuracy"), res.mean("discrete", lvl, "retention_accuracy")
        res.checks.append(Check(f"level_order_{lvl:g}_info", True, f"forget node {fn:.4f} vs discrete {fd:.4f} (node lower: {fn <= fd}); retention node {rn:.4f} vs discrete {rd:.4f} (node higher: {rn >= rd})"))
    for v in ("node", "discrete"):
        ra = [res.mean(v, lvl, "retention_accuracy") for lvl in levels]
        # tolerance: one binomial standard error at the evaluation sample size
        tol = 0.5 / math.sqrt(N_EVAL_NOISE * (get_world(world_spec).k - 1) * len(seeds))
        mono = all(b <= a + tol for a, b in zip(ra, ra[1:]))
        res.checks.append(Check(f"retention_monotone_{v}", mono, " ".join(f"{x:.4f}" for x in ra)))
    return res
