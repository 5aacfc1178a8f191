"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the lines are
repeated in the terminal summary. Multi-seed criteria use seeds 200-204,
which no calibration pilot touched.
"""
import time

import numpy as np
import pytest

from odeunlearn import experiments as ex
from odeunlearn.checks import ADJOINT_STEPS, adjoint_convergence, flow_fd_errors, random_field
from odeunlearn.cli import main
from odeunlearn.metrics import check_smoothness, check_trajectory_noncrossing, evaluate
from odeunlearn.numkit import make_rng
from odeunlearn.odeflow import SolverSpec
from odeunlearn.toygen import AdapterStack, NodeAdapter, generate, init_node_stack, sample_identity, sample_latents
from odeunlearn.unlearning import UnlearnConfig, init_stack, run_unlearning

SEEDS = (200, 201, 202, 203, 204)
LINES = []


def report(n: int, name: str, ok: bool, detail: str, seconds: float, limit: float):
    fast = seconds < limit
    line = f"{'PASS' if ok and fast else 'FAIL'} criterion {n} ({name}): {detail}; {seconds:.1f}s (limit {limit:g}s)"
    LINES.append(line)
    print(line)
    assert ok, line
    assert fast, line


def test_criterion_01_gradients():
    t = time.perf_counter()
    fd = flow_fd_errors(seed=7, n=50)
    assert all(r[2] <= 8 and r[3] <= 8 for r in fd)
    fd_max = max(r[4] for r in fd)
    conv = adjoint_convergence(seed=7, n=10, dim=8, hidden=16, horizon=1.0, method="euler")
    errs = [conv[N] for N in ADJOINT_STEPS]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    ok = fd_max < 1e-4 and decreasing and conv[64] < 1e-2
    detail = f"FD max rel err {fd_max:.2e}; adjoint vs unrolled " + ", ".join(f"N={N}:{e:.2e}" for N, e in conv.items())
    report(1, "gradient correctness", ok, detail, time.perf_counter() - t, 60)


def test_criterion_02_identity_at_init():
    t = time.perf_counter()
    world = ex.get_world(0)
    w = sample_latents(world, make_rng(1), 100)
    frozen = generate(world, None, w)
    same = {}
    for method in ("euler", "midpoint", "rk4"):
        stack = init_node_stack(world, make_rng(2), spec=SolverSpec(method, 4, 0.4))
        same[method] = bool(np.array_equal(generate(world, stack, w), frozen))
    report(2, "identity at init", all(same.values()), f"bitwise equal {same}", time.perf_counter() - t, 5)


def test_criterion_03_smoothness():
    t = time.perf_counter()
    rng = make_rng(3)
    ratios, orders, passed = [], [], True
    for _ in range(10):
        stack = AdapterStack((NodeAdapter(0, random_field(rng, 8, 16, 0.2), SolverSpec("rk4", 100, 0.01)),))
        rep = check_smoothness(stack, rng, n_pairs=100, eps=0.05)
        ratios.append(rep.max_ratio)
        orders.append(rep.orders[0])
        passed &= rep.passed
    ok = passed and max(ratios) <= 1.05 and all(1.8 <= o <= 2.2 for o in orders)
    detail = f"max |dPhi|/(e^(LT)|dx0|) {max(ratios):.4f}; FD orders {min(orders):.3f}..{max(orders):.3f}"
    report(3, "forward bound and C1 flow", ok, detail, time.perf_counter() - t, 120)


def test_criterion_04_noncrossing():
    t = time.perf_counter()
    world = ex.get_world(0)
    cfg = UnlearnConfig()
    fresh = init_stack(world, cfg, make_rng(4))
    rng = make_rng(5)
    trained, _ = run_unlearning(world, sample_identity(world, rng, 0), cfg, rng=rng)
    parts, ok = [], True
    for name, stack in (("pre", fresh), ("post", trained)):
        rep = check_trajectory_noncrossing(world, stack, 0, 1, make_rng(6), n_pairs=100)
        ok &= rep.passed and rep.min_ratio >= 0.95
        parts.append(f"{name} min ratio {rep.min_ratio:.4f}, min distance {rep.min_margin:.3f}")
    report(4, "non-crossing", ok, "; ".join(parts), time.perf_counter() - t, 120)


def test_criterion_05_step_size_trend():
    t = time.perf_counter()
    res = ex.run_step_size_sweep(ex.SweepSpec("step_size", ex.STEP_SIZE_GRID, seeds=SEEDS))
    checks = {c.name: c for c in res.checks}
    ok = checks["interior_optimum"].passed and checks["retention_worst_at_largest_dt"].passed
    detail = checks["interior_optimum"].detail + "; " + checks["retention_worst_at_largest_dt"].detail
    report(5, "step-size interior optimum", ok, detail, time.perf_counter() - t, 1800)


def test_criterion_06_ablation():
    t = time.perf_counter()
    res = ex.run_ablation(seeds=SEEDS)
    ok = all(c.passed for c in res.checks)
    report(6, "ablation ordering", ok, "; ".join(c.line() for c in res.checks), time.perf_counter() - t, 1200)


def test_criterion_07_end_to_end():
    t = time.perf_counter()
    world = ex.get_world(0)
    cfg = UnlearnConfig()
    rows, ok = [], True
    for seed in SEEDS:
        fresh = init_stack(world, cfg, make_rng(seed))
        before = evaluate(world, fresh, [0], make_rng(ex.EVAL_OFFSET + seed), n_per_id=ex.N_EVAL)
        _, _, after, _ = ex.train_and_evaluate(world, cfg, seed)
        good = before.forget_rate >= 0.99 and after.forget_rate <= 0.2 and after.retention_accuracy >= 0.95
        good &= after.mmd_retain <= ex.MMD_RETAIN_THRESHOLD
        ok &= good
        rows.append(f"seed {seed}: forget {before.forget_rate:.2f}->{after.forget_rate:.2f}, retention {after.retention_accuracy:.3f}, mmd {after.mmd_retain:.4f}")
    report(7, "end-to-end unlearning", ok, "; ".join(rows) + f" (mmd bar {ex.MMD_RETAIN_THRESHOLD:g})", time.perf_counter() - t, 600)


def test_criterion_08_multi_identity():
    t = time.perf_counter()
    res = ex.run_multi_identity(ids=(0, 1, 2), seeds=SEEDS)
    wanted = [c for c in res.checks if c.name.split("_")[0] in ("forget", "mmd", "noncrossing")]
    ok = all(c.passed for c in wanted)
    report(8, "multi-identity", ok, "; ".join(c.line() for c in wanted), time.perf_counter() - t, 1800)


def test_criterion_09_noise_attack():
    t = time.perf_counter()
    res = ex.run_noise_attack(seeds=SEEDS)
    wanted = [c for c in res.checks if "degradation" in c.name]
    ok = all(c.passed for c in wanted)
    report(9, "noise attack", ok, "; ".join(c.line() for c in wanted), time.perf_counter() - t, 900)


def test_criterion_10_reproducible_cli(tmp_path):
    t = time.perf_counter()
    invocations = [
        ["unlearn", "--seed", "3"],
        ["gradcheck", "--seed", "1"],
        ["ablation", "--seed", "5", "--set", "epochs=40", "--set", "n_seeds=2"],
        ["noise", "--seed", "2", "--set", "epochs=40", "--set", "n_seeds=1"],
    ]
    ok, compared = True, 0
    for i, args in enumerate(invocations):
        a, b = tmp_path / f"{i}a", tmp_path / f"{i}b"
        main(args + ["--out", str(a)])
        main(args + ["--out", str(b)])
        for f in sorted(a.glob("*.csv")):
            ok &= f.read_bytes() == (b / f.name).read_bytes()
            compared += 1
    report(10, "reproducibility", ok and compared >= 5, f"{compared} CSV files byte-identical across repeated invocations", time.perf_counter() - t, 120)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
