"""Identity unlearning: target selection, adjacency sampling, losses and the Adam loop.

Only adapter parameters are trained. Targets always come from the frozen
generator, so the world itself is never touched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .numkit import make_rng, sample_uniform
from .odeflow import DivergenceError, SolverSpec
from .toygen import (
    AdapterStack,
    DiscreteAdapterStack,
    NodeAdapter,
    ToyWorld,
    backward,
    forward,
    generate,
    init_discrete_stack,
    init_node_stack,
    sample_latents,
)
from .vecfield import field_eval, vjp_params, vjp_state

__all__ = [
    "UnlearnConfig",
    "ForgetBatch",
    "AdamState",
    "DegenerateSourceError",
    "unidentify_target",
    "sample_adjacency",
    "loss_forget",
    "loss_retain",
    "loss_tc",
    "total_loss",
    "adam_step",
    "init_stack",
    "run_unlearning",
    "write_history",
]


class DegenerateSourceError(ValueError):
    """The source latent sits on the mean latent, so no direction is defined."""


@dataclass(frozen=True)
class UnlearnConfig:
    # d and a_max are in units of the per-coordinate std of Map(z)
    d: float = 3.0
    a_max: float = 1.5
    n_a: int = 2
    n_r: int = 2
    lambda_l2: float = 0.01
    lambda_per: float = 1.0
    lambda_id: float = 0.1
    lambda_u: float = 1.0
    lambda_tc: float = 1.0
    lambda_r: float = 1.0
    epochs: int = 1000
    learning_rate: float = 1e-3
    seed: int = 0
    adapter: str = "node"  # or "discrete"
    solver: str = "euler"
    steps: int = 4
    step_size: float = 0.4
    hidden: int = 32
    rank: int = 4
    gradient: str = "unrolled"  # or "adjoint"

    def __post_init__(self):
        for name in ("lambda_l2", "lambda_per", "lambda_id", "lambda_u", "lambda_tc", "lambda_r"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_a", "n_r", "hidden", "rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.a_max < 0:
            raise ValueError("a_max must be >= 0")
        if self.adapter not in ("node", "discrete"):
            raise ValueError(f"adapter must be 'node' or 'discrete', got {self.adapter!r}")
        if self.gradient not in ("unrolled", "adjoint"):
            raise ValueError(f"gradient must be 'unrolled' or 'adjoint', got {self.gradient!r}")
        self.solver_spec  # validates solver, steps, step_size

    @property
    def solver_spec(self) -> SolverSpec:
        return SolverSpec(self.solver, self.steps, self.step_size)

    def with_(self, **kw) -> "UnlearnConfig":
        return replace(self, **kw)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ForgetBatch:
    w_u: np.ndarray
    w_t: np.ndarray
    adj_u: np.ndarray  # (n_a, latent_dim)
    adj_t: np.ndarray
    retain: np.ndarray  # (n_r, latent_dim)

    @property
    def offsets(self) -> np.ndarray:
        return self.adj_u - self.w_u


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def unidentify_target(w_u, w_bar, d: float) -> np.ndarray:
    """Reflect the source through the mean latent: ``w_bar - d * unit(w_u - w_bar)``."""
    w_id = np.asarray(w_u, dtype=np.float64) - np.asarray(w_bar, dtype=np.float64)
    norm = float(np.linalg.norm(w_id))
    if norm <= 1e-9:
        raise DegenerateSourceError("source latent coincides with the mean latent")
    return w_bar - d * (w_id / norm)


def sample_adjacency(rng, world: ToyWorld, w_u, w_t, cfg: UnlearnConfig) -> ForgetBatch:
    """Retain latents plus ``n_a`` source/target pairs sharing each offset."""
    retain = sample_latents(world, rng, cfg.n_r)
    a_max = cfg.a_max * world.w_scale
    offsets = np.empty((cfg.n_a, world.latent_dim))
    for i in range(cfg.n_a):
        alpha = sample_uniform(rng, 0.0, a_max)
        for _ in range(10):
            direction = sample_latents(world, rng, 1)[0] - w_u
            norm = np.linalg.norm(direction)
            if norm > 1e-12:
                break
        else:
            raise DegenerateSourceError("retain direction sample kept landing on the source latent")
        offsets[i] = alpha * direction / norm
    return ForgetBatch(np.asarray(w_u, dtype=np.float64), np.asarray(w_t, dtype=np.float64), w_u + offsets, w_t + offsets, retain)


# loss terms on observations ------------------------------------------------


def _local_terms(world: ToyWorld, xu: np.ndarray, xt: np.ndarray, cfg: UnlearnConfig):
    """Row-wise local loss and its gradient with respect to ``xu``."""
    diff = xu - xt
    m = xu.shape[-1]
    l2 = (diff**2).sum(-1) / m
    g = (2.0 * cfg.lambda_l2 / m) * diff
    pd = diff @ world.per_proj.T
    e = pd.shape[-1]
    per = (pd**2).sum(-1) / e
    g = g + (2.0 * cfg.lambda_per / e) * pd @ world.per_proj
    a = xu @ world.id_proj.T
    b = xt @ world.id_proj.T
    na = np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    cos = (a * b).sum(-1, keepdims=True) / (na * nb)
    dcos = b / (na * nb) - cos * a / na**2
    g = g - cfg.lambda_id * dcos @ world.id_proj
    loss = cfg.lambda_l2 * l2 + cfg.lambda_per * per + cfg.lambda_id * (1.0 - cos[..., 0])
    return loss, g


def _mode(stack: AdapterStack, cfg: UnlearnConfig) -> str:
    return cfg.gradient if not isinstance(stack, DiscreteAdapterStack) else "unrolled"


# most recent source trajectory: (stack, world, tape, cfg)
_TC_CACHE: list = [None]


def loss_forget(world: ToyWorld, stack: AdapterStack, batch: ForgetBatch, cfg: UnlearnConfig, reference: AdapterStack | None = None):
    """Local loss at ``w_u`` plus the mean local loss over the adjacent pairs.

    Targets are rendered by the reference generator (the frozen one when
    ``reference`` is None). Caches the source's trajectory for :func:`loss_tc`.
    """
    src = np.vstack([batch.w_u[None, :], batch.adj_u])
    tgt = np.vstack([batch.w_t[None, :], batch.adj_t])
    xu, tape = forward(world, stack, src, record=True)
    xt = generate(world, reference, tgt)
    rows, g = _local_terms(world, xu, xt, cfg)
    n_a = len(batch.adj_u)
    weights = np.concatenate([[1.0], np.full(n_a, 1.0 / n_a)])
    loss = float(weights @ rows)
    grad = backward(world, stack, tape, g * weights[:, None], mode=_mode(stack, cfg))
    _TC_CACHE[0] = (stack, world, tape, cfg)
    return loss, grad


def loss_retain(world: ToyWorld, stack: AdapterStack, batch: ForgetBatch, cfg: UnlearnConfig, reference: AdapterStack | None = None):
    """Mean perceptual-stand-in distance between adapted and reference outputs on retain latents."""
    xu, tape = forward(world, stack, batch.retain, record=True)
    xs = generate(world, reference, batch.retain)
    pd = (xu - xs) @ world.per_proj.T
    n, e = pd.shape
    loss = float((pd**2).sum() / (e * n))
    g = (2.0 / (e * n)) * pd @ world.per_proj
    return loss, backward(world, stack, tape, g, mode=_mode(stack, cfg))


def loss_tc(stack: AdapterStack):
    """Sum of squared changes of the last adapter's field along the cached source trajectory."""
    cached = _TC_CACHE[0]
    if cached is None or cached[0] is not stack:
        raise RuntimeError("no cached trajectory for this stack; call loss_forget first")
    _, world, tape, cfg = cached
    last = max(a.stage for a in stack.adapters)
    ad = stack.at(last)
    if not isinstance(ad, NodeAdapter):
        raise TypeError("trajectory consistency needs a Neural ODE adapter")
    traj = tape.caches[last]
    p = ad.params
    hs = traj.states[:, 0, :]
    evs = [field_eval(h, t, p) for h, t in zip(hs, traj.times)]
    diffs = [evs[k + 1].value - evs[k].value for k in range(len(evs) - 1)]
    loss = float(sum(np.dot(dk, dk) for dk in diffs))
    n = len(evs)
    grad = np.zeros(stack.size)
    if loss == 0.0:
        return 0.0, grad
    direct = np.zeros(ad.size)
    sc = np.zeros_like(traj.states)
    for k in range(n):
        cot = np.zeros(p.dim)
        if k > 0:
            cot += 2.0 * diffs[k - 1]
        if k < n - 1:
            cot -= 2.0 * diffs[k]
        direct += vjp_params(evs[k], hs[k], traj.times[k], p, cot).to_vector()
        sc[k, 0] = vjp_state(evs[k], hs[k], traj.times[k], p, cot)
    grad[stack.offsets()[last]] += direct
    if _mode(stack, cfg) == "unrolled":
        d_x = np.zeros_like(traj.states[-1])
        grad += backward(world, stack, tape, d_x, mode="unrolled", state_cotangents={last: sc})
    return loss, grad


def total_loss(world: ToyWorld, stack: AdapterStack, batch: ForgetBatch, cfg: UnlearnConfig, reference: AdapterStack | None = None):
    """``lambda_u L_u + lambda_tc L_TC + lambda_r L_r`` with its gradient and the parts."""
    lu, gu = loss_forget(world, stack, batch, cfg, reference)
    use_tc = cfg.lambda_tc > 0 and isinstance(stack.at(max(a.stage for a in stack.adapters)), NodeAdapter)
    ltc, gtc = loss_tc(stack) if use_tc else (0.0, 0.0)
    _TC_CACHE[0] = None
    lr, gr = loss_retain(world, stack, batch, cfg, reference)
    total = cfg.lambda_u * lu + cfg.lambda_tc * ltc + cfg.lambda_r * lr
    grad = cfg.lambda_u * gu + cfg.lambda_tc * gtc + cfg.lambda_r * gr
    return total, grad, {"L_u": lu, "L_TC": ltc, "L_r": lr}


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; advances ``state`` in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def init_stack(world: ToyWorld, cfg: UnlearnConfig, rng) -> AdapterStack:
    if cfg.adapter == "discrete":
        return init_discrete_stack(world, rng, rank=cfg.rank)
    return init_node_stack(world, rng, hidden=cfg.hidden, spec=cfg.solver_spec)


def run_unlearning(world: ToyWorld, sources, cfg: UnlearnConfig, stack: AdapterStack | None = None, rng=None):
    """Unlearn each source latent in turn, each for ``cfg.epochs`` Adam steps.

    Each source is unlearned relative to the generator as it stands when that
    source's run begins: the frozen generator for a fresh stack, otherwise a
    snapshot of the incoming stack. Sequential runs therefore keep earlier
    identities forgotten instead of pulling them back toward the original.

    Returns the trained stack and a history of
    ``(epoch, L_u, L_TC, L_r, total)`` rows.
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    fresh = stack is None
    if fresh:
        stack = init_stack(world, cfg, rng)
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    d = cfg.d * world.w_scale
    targets = [unidentify_target(w_u, world.w_bar, d) for w_u in sources]
    history = []
    epoch = 0
    for j, (w_u, w_t) in enumerate(zip(sources, targets)):
        reference = None if fresh and j == 0 else stack
        vec = stack.to_vector()
        state = AdamState.zeros_like(vec)
        for _ in range(cfg.epochs):
            batch = sample_adjacency(rng, world, w_u, w_t, cfg)
            try:
                total, grad, parts = total_loss(world, stack, batch, cfg, reference)
            except DivergenceError as exc:
                raise DivergenceError(f"diverged at epoch {epoch}: {exc}", exc.step) from exc
            history.append((epoch, parts["L_u"], parts["L_TC"], parts["L_r"], total))
            vec = adam_step(vec, grad, state, cfg.learning_rate)
            stack = stack.with_vector(vec)
            epoch += 1
    return stack, history


def write_history(path, history) -> None:
    lines = ["epoch,L_u,L_TC,L_r,total"]
    lines += [",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]) for row in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
