"""Compare a discrete low-rank adapter with the continuous-time adapter
(with and without the trajectory-consistency term), then perturb the
latent input with Gaussian noise to see how each unlearned model degrades.
"""
from odeunlearn import experiments as ex

seeds = (0, 1, 2)
abl = ex.run_ablation(seeds=seeds)
print(f"{'variant':>10s}{'forget':>9s}{'mmd':>10s}{'retention':>11s}")
for lab in abl.labels:
    f, _ = abl.stat(lab, "forget_rate")
    m, _ = abl.stat(lab, "mmd_retain")
    r, _ = abl.stat(lab, "retention_accuracy")
    print(f"{lab:>10s}{f:9.3f}{m:10.5f}{r:11.3f}")
for chk in abl.checks:
    print(chk.line())

noise = ex.run_noise_attack(seeds=seeds)
print(f"\n{'noise':>6s}" + "".join(f"{v + ' ' + a:>22s}" for v in ("node", "discrete") for a in ("forget", "retain")))
for level in noise.levels:
    vals = [noise.mean(v, level, a) for v in ("node", "discrete") for a in ("forget_rate", "retention_accuracy")]
    print(f"{level:6g}" + "".join(f"{x:22.4f}" for x in vals))
for chk in noise.checks:
    print(chk.line())
