"""Unlearn three identities one after another, each run starting from the
stack the previous one produced, and track forgetting, distribution drift
and whether trajectories of different identities ever cross.
"""
from odeunlearn import experiments as ex

res = ex.run_multi_identity(ids=(0, 1, 2), seeds=(0, 1))
for chk in res.checks:
    print(chk.line())
