"""Fixed-step explicit ODE integration and the two gradient routes.

``unrolled_gradient`` differentiates the discrete solver exactly
(discretize-then-optimize). ``adjoint_gradient`` integrates the augmented
adjoint system backward on the same step grid (optimize-then-discretize).
The two agree as the step count grows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .vecfield import FieldEval, FieldParams, field_eval, vjp_params, vjp_state

__all__ = [
    "DivergenceError",
    "SolverSpec",
    "Trajectory",
    "FlowGradient",
    "TABLEAUS",
    "euler_step",
    "midpoint_step",
    "rk4_step",
    "integrate",
    "unrolled_gradient",
    "backprop_trajectory",
    "adjoint_gradient",
    "flow_jacobian",
    "summed",
]

Field = Union[FieldParams, Callable[[np.ndarray, float], np.ndarray]]


class DivergenceError(FloatingPointError):
    """A solver produced a non-finite state."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class Tableau:
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    c: tuple[float, ...]

    @property
    def stages(self) -> int:
        return len(self.b)


TABLEAUS = {
    "euler": Tableau(a=((),), b=(1.0,), c=(0.0,)),
    "midpoint": Tableau(a=((), (0.5,)), b=(0.0, 1.0), c=(0.0, 0.5)),
    "rk4": Tableau(
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
        c=(0.0, 0.5, 0.5, 1.0),
    ),
}


@dataclass(frozen=True)
class SolverSpec:
    method: str = "euler"
    steps: int = 4
    step_size: float = 0.4

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ValueError(f"unknown solver {self.method!r}; choose from {sorted(TABLEAUS)}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @property
    def horizon(self) -> float:
        return self.steps * self.step_size


@dataclass
class Trajectory:
    states: np.ndarray  # (steps + 1, *state_shape)
    times: np.ndarray
    spec: SolverSpec
    # per step, per stage: (stage input, FieldEval); only kept when recording
    evals: list = field(default_factory=list, repr=False)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class FlowGradient:
    d_params: FieldParams
    d_initial: np.ndarray


def _evaluate(fld: Field, h: np.ndarray, t: float):
    if isinstance(fld, FieldParams):
        ev = field_eval(h, t, fld)
        return ev.value, ev
    return np.asarray(fld(h, t), dtype=np.float64), None


def _rk_step(h, t, fld: Field, dt: float, tab: Tableau, record: list | None = None):
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    ks = []
    for i in range(tab.stages):
        y = h
        for j, aij in enumerate(tab.a[i]):
            if aij != 0.0:
                y = y + (dt * aij) * ks[j]
        k, ev = _evaluate(fld, y, t + tab.c[i] * dt)
        ks.append(k)
        if record is not None:
            record.append((y, ev))
    incr = None
    for bi, k in zip(tab.b, ks):
        if bi != 0.0:
            incr = bi * k if incr is None else incr + bi * k
    return h + dt * incr


def _checked(out: np.ndarray, step: int | None = None) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        where = "" if step is None else f" at step {step}"
        raise DivergenceError(f"non-finite state{where}", step)
    return out


def euler_step(h, t: float, fld: Field, dt: float) -> np.ndarray:
    """``h + dt * f(h, t)``."""
    return _checked(_rk_step(np.asarray(h, dtype=np.float64), t, fld, dt, TABLEAUS["euler"]))


def midpoint_step(h, t: float, fld: Field, dt: float) -> np.ndarray:
    return _checked(_rk_step(np.asarray(h, dtype=np.float64), t, fld, dt, TABLEAUS["midpoint"]))


def rk4_step(h, t: float, fld: Field, dt: float) -> np.ndarray:
    return _checked(_rk_step(np.asarray(h, dtype=np.float64), t, fld, dt, TABLEAUS["rk4"]))


def integrate(z0, fld: Field, spec: SolverSpec, t0: float = 0.0, record: bool = False) -> Trajectory:
    """Run ``spec.steps`` solver steps from ``z0``; ``record`` keeps stage evals for backprop."""
    z = np.asarray(z0, dtype=np.float64)
    _checked(z)
    tab = TABLEAUS[spec.method]
    dt = spec.step_size
    states = np.empty((spec.steps + 1,) + z.shape)
    states[0] = z
    times = t0 + dt * np.arange(spec.steps + 1)
    evals = []
    for n in range(spec.steps):
        rec = [] if record else None
        z = _checked(_rk_step(z, times[n], fld, dt, tab, rec), n)
        states[n + 1] = z
        if record:
            evals.append(rec)
    return Trajectory(states, times, spec, evals)


def backprop_trajectory(traj: Trajectory, p: FieldParams, d_final=None, state_cotangents=None) -> FlowGradient:
    """Reverse-mode pass through a recorded trajectory.

    ``state_cotangents`` optionally adds ``dL/dh_n`` for every stored state
    (shape like ``traj.states``); ``d_final`` is added to the last one.
    """
    if not traj.evals:
        raise ValueError("trajectory was not recorded; integrate with record=True")
    tab = TABLEAUS[traj.spec.method]
    dt = traj.spec.step_size
    shape = traj.states.shape[1:]
    dh = np.zeros(shape)
    if d_final is not None:
        dh = dh + np.asarray(d_final, dtype=np.float64)
    if state_cotangents is not None:
        state_cotangents = np.asarray(state_cotangents, dtype=np.float64)
        dh = dh + state_cotangents[-1]
    grad = [np.zeros_like(b) for b in p.blocks()]
    for n in range(traj.spec.steps - 1, -1, -1):
        rec = traj.evals[n]
        t = traj.times[n]
        dk = [dt * bi * dh for bi in tab.b]
        dprev = dh.copy()
        for i in range(tab.stages - 1, -1, -1):
            if not np.any(dk[i]):
                continue
            y, ev = rec[i]
            ti = t + tab.c[i] * dt
            dy = vjp_state(ev, y, ti, p, dk[i])
            for g, blk in zip(grad, vjp_params(ev, y, ti, p, dk[i]).blocks()):
                g += blk
            dprev += dy
            for j, aij in enumerate(tab.a[i]):
                if aij != 0.0:
                    dk[j] = dk[j] + (dt * aij) * dy
        dh = dprev
        if state_cotangents is not None:
            dh = dh + state_cotangents[n]
    return FlowGradient(FieldParams(*grad), dh)


def unrolled_gradient(z0, p: FieldParams, spec: SolverSpec, dL_dzT, t0: float = 0.0) -> FlowGradient:
    """Exact gradient of the discrete solver map for the cotangent ``dL_dzT``."""
    traj = integrate(z0, p, spec, t0, record=True)
    return backprop_trajectory(traj, p, d_final=dL_dzT)


def adjoint_gradient(z0, p: FieldParams, spec: SolverSpec, dL_dzT, t0: float = 0.0) -> FlowGradient:
    """Integrate ``(z, a, g)`` backward from T to t0 with the forward solver and grid.

    ``da/dt = -a^T df/dz`` and ``dg/dt = -a^T df/dtheta`` with ``g(T) = 0``;
    returns ``g(t0) = dL/dtheta`` and ``a(t0) = dL/dz0``.
    """
    zT = integrate(z0, p, spec, t0).final
    a = np.asarray(dL_dzT, dtype=np.float64)
    if a.shape != zT.shape:
        raise ValueError(f"cotangent shape {a.shape} does not match state {zT.shape}")
    tab = TABLEAUS[spec.method]
    h = -spec.step_size
    z = zT
    g = np.zeros(p.size)
    for n in range(spec.steps, 0, -1):
        t = t0 + n * spec.step_size
        kz, ka, kg = [], [], []
        for i in range(tab.stages):
            yz, ya, yg = z, a, g
            for j, aij in enumerate(tab.a[i]):
                if aij != 0.0:
                    yz = yz + (h * aij) * kz[j]
                    ya = ya + (h * aij) * ka[j]
            ti = t + tab.c[i] * h
            ev = field_eval(yz, ti, p)
            kz.append(ev.value)
            ka.append(-vjp_state(ev, yz, ti, p, ya))
            kg.append(-vjp_params(ev, yz, ti, p, ya).to_vector())
        z = z + h * sum(bi * k for bi, k in zip(tab.b, kz))
        a = a + h * sum(bi * k for bi, k in zip(tab.b, ka))
        g = g + h * sum(bi * k for bi, k in zip(tab.b, kg))
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(a))):
            raise DivergenceError(f"non-finite adjoint state at step {n - 1}", n - 1)
    return FlowGradient(FieldParams.from_vector(g, p.dim, p.hidden), a)


def flow_jacobian(z0, p: FieldParams, spec: SolverSpec, t0: float = 0.0) -> np.ndarray:
    """Exact Jacobian of the discrete flow map at a single point ``z0``."""
    z0 = np.asarray(z0, dtype=np.float64)
    traj = integrate(z0, p, spec, t0, record=True)
    rows = [backprop_trajectory(traj, p, d_final=e).d_initial for e in np.eye(z0.size)]
    return np.array(rows)


def summed(grads: Sequence[FlowGradient]) -> FlowGradient:
    it = iter(grads)
    acc = next(it)
    for g in it:
        acc = FlowGradient(acc.d_params + g.d_params, acc.d_initial + g.d_initial)
    return acc
