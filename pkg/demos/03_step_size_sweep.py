"""Sweep the solver step size at a fixed number of steps and print the
composite objective J = forget_rate + mmd_retain / MMD_SCALE per setting.
Two seeds keep this quick; the CLI ``sweep`` subcommand runs the full grid.
"""
from odeunlearn import experiments as ex

spec = ex.SweepSpec("step_size", ex.STEP_SIZE_GRID, seeds=(0, 1))
res = ex.run_step_size_sweep(spec)

print(f"{'step_size':>10s}{'J':>9s}{'SE':>8s}{'forget':>9s}{'mmd':>10s}{'retention':>11s}")
for lab in res.labels:
    j, se = res.stat(lab)
    f, _ = res.stat(lab, "forget_rate")
    m, _ = res.stat(lab, "mmd_retain")
    r, _ = res.stat(lab, "retention_accuracy")
    print(f"{lab:>10s}{j:9.3f}{se:8.3f}{f:9.3f}{m:10.5f}{r:11.3f}")
print()
for chk in res.checks:
    print(chk.line())
