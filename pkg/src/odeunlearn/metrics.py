"""Forgetting/retention metrics and flow-level diagnostic checks.

Nothing here mutates a world or a stack.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .odeflow import SolverSpec, flow_jacobian, integrate
from .toygen import AdapterStack, NodeAdapter, ToyWorld, classify, forward, generate, identity_embed, sample_identity, sample_latents
from .vecfield import lipschitz_upper_bound

__all__ = [
    "DegenerateInputError",
    "MetricReport",
    "CSV_COLUMNS",
    "id_similarity",
    "id_avg",
    "mmd",
    "retention_accuracy",
    "forget_rate",
    "leakage",
    "evaluate",
    "noise_attack_eval",
    "check_trajectory_noncrossing",
    "check_smoothness",
]

CSV_COLUMNS = ("run_id", "seed", "id_score", "id_avg", "mmd_retain", "retention_accuracy", "forget_rate", "leakage")
FINE_DT = 0.01


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    id_score: float
    id_avg: float
    mmd_retain: float
    retention_accuracy: float
    forget_rate: float
    leakage: float

    def __post_init__(self):
        for name in ("retention_accuracy", "forget_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.mmd_retain < -1e-12:
            raise ValueError(f"mmd_retain below the estimator floor: {self.mmd_retain}")

    def csv_row(self, run_id: str, seed: int) -> str:
        vals = [repr(float(getattr(self, c))) for c in CSV_COLUMNS[2:]]
        return ",".join([str(run_id), str(int(seed))] + vals)

    def as_dict(self) -> dict:
        return asdict(self)


def id_similarity(world: ToyWorld, x_before, x_after) -> float:
    """Cosine similarity of the two observations' identity embeddings."""
    x_before = np.asarray(x_before, dtype=np.float64)
    x_after = np.asarray(x_after, dtype=np.float64)
    if x_before.shape != x_after.shape:
        raise ValueError(f"observation shapes differ: {x_before.shape} vs {x_after.shape}")
    a = identity_embed(world, x_before)
    b = identity_embed(world, x_after)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("zero-norm identity embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def id_avg(world: ToyWorld, stack, ident: int, n: int, rng) -> float:
    """Mean before/after similarity over ``n`` fresh draws of one identity."""
    if n < 1:
        raise ValueError("n must be >= 1")
    w = sample_identity(world, rng, ident, n)
    before = generate(world, None, w)
    after = generate(world, stack, w)
    return float(np.mean([id_similarity(world, b, a) for b, a in zip(before, after)]))


def _fsum_kernel(x, y, bw) -> tuple[float, float]:
    d2 = cdist(x, y, "sqeuclidean")
    k = np.exp(-d2 / (2.0 * bw * bw))
    return math.fsum(k.ravel()), math.fsum(np.diag(k)) if k.shape[0] == k.shape[1] else 0.0


def mmd(xs, ys, biased: bool = False, bandwidth: float | None = None) -> float:
    """Squared MMD with an RBF kernel and median-heuristic bandwidth.

    Sums are exactly rounded (``math.fsum``) so the value does not depend on
    sample order.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    m, n = len(xs), len(ys)
    if m == 0 or n == 0:
        raise ValueError("both samples must be non-empty")
    if bandwidth is None:
        bandwidth = float(np.median(pdist(np.vstack([xs, ys]))))
    if not bandwidth > 0:
        raise DegenerateInputError("zero kernel bandwidth: pooled points are identical")
    sxx, dxx = _fsum_kernel(xs, xs, bandwidth)
    syy, dyy = _fsum_kernel(ys, ys, bandwidth)
    sxy, _ = _fsum_kernel(xs, ys, bandwidth)
    if biased:
        return math.fsum([sxx / (m * m), syy / (n * n), -2.0 * sxy / (m * n)])
    if m < 2 or n < 2:
        raise ValueError("unbiased estimate needs at least two points per sample")
    return math.fsum([(sxx - dxx) / (m * (m - 1)), (syy - dyy) / (n * (n - 1)), -2.0 * sxy / (m * n)])


def _labels_hits(world, stack, idents, rng, n_per_id, noise_std):
    hits = []
    for ident in idents:
        w = sample_identity(world, rng, ident, n_per_id)
        w = w + noise_std * rng.standard_normal(w.shape)
        hits.append(classify(world, generate(world, stack, w)) == ident)
    return np.concatenate(hits) if hits else np.zeros(0, dtype=bool)


def retention_accuracy(world: ToyWorld, stack, rng, n_per_id: int, forgotten=(), noise_std: float = 0.0) -> float:
    """Fraction of retained-identity samples still classified as their own identity."""
    if n_per_id < 10:
        raise ValueError("n_per_id must be >= 10")
    keep = [i for i in range(world.k) if i not in set(forgotten)]
    return float(np.mean(_labels_hits(world, stack, keep, rng, n_per_id, noise_std)))


def forget_rate(world: ToyWorld, stack, rng, n_per_id: int, forgotten=(0,), noise_std: float = 0.0) -> float:
    """Fraction of forgotten-identity samples still classified as the forgotten identity."""
    if n_per_id < 10:
        raise ValueError("n_per_id must be >= 10")
    return float(np.mean(_labels_hits(world, stack, list(forgotten), rng, n_per_id, noise_std)))


def _attribution(world: ToyWorld, x) -> np.ndarray:
    e = np.atleast_2d(identity_embed(world, x))
    d = np.sqrt(((e[:, None, :] - world.id_centers[None, :, :]) ** 2).sum(-1))
    z = -d + d.min(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def leakage(world: ToyWorld, stack, forgotten, rng, n: int, noise_std: float = 0.0) -> float:
    """Mean softmax(-distance) mass on the forgotten identities over retained-identity outputs."""
    if n < 10:
        raise ValueError("n must be >= 10")
    forgotten = [forgotten] if np.isscalar(forgotten) else list(forgotten)
    keep = [i for i in range(world.k) if i not in set(forgotten)]
    mass = []
    for ident in keep:
        w = sample_identity(world, rng, ident, n)
        w = w + noise_std * rng.standard_normal(w.shape)
        mass.append(_attribution(world, generate(world, stack, w))[:, forgotten].sum(axis=1))
    return float(np.mean(np.concatenate(mass)))


def evaluate(
    world: ToyWorld,
    stack,
    forgotten,
    rng,
    sources=None,
    n_per_id: int = 50,
    n_mmd: int = 200,
    noise_std: float = 0.0,
) -> MetricReport:
    """Full metric report; ``noise_std`` perturbs every test latent.

    The random stream is consumed identically for every ``noise_std``, so a
    zero-noise call reproduces the clean evaluation bit for bit.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    forgotten = [forgotten] if np.isscalar(forgotten) else list(forgotten)
    if sources is None:
        sources = world.centers[forgotten]
    sources = np.atleast_2d(sources)
    src = sources + noise_std * rng.standard_normal(sources.shape)
    before, after = generate(world, None, src), generate(world, stack, src)
    id_score = float(np.mean([id_similarity(world, b, a) for b, a in zip(before, after)]))
    sims = []
    for ident in forgotten:
        w = sample_identity(world, rng, ident, n_per_id)
        w = w + noise_std * rng.standard_normal(w.shape)
        b, a = generate(world, None, w), generate(world, stack, w)
        sims.extend(id_similarity(world, bi, ai) for bi, ai in zip(b, a))
    w = sample_latents(world, rng, n_mmd)
    w = w + noise_std * rng.standard_normal(w.shape)
    mmd_retain = mmd(generate(world, None, w), generate(world, stack, w), biased=True)
    return MetricReport(
        id_score=id_score,
        id_avg=float(np.mean(sims)),
        mmd_retain=max(mmd_retain, 0.0),
        retention_accuracy=retention_accuracy(world, stack, rng, n_per_id, forgotten, noise_std),
        forget_rate=forget_rate(world, stack, rng, n_per_id, forgotten, noise_std),
        leakage=leakage(world, stack, forgotten, rng, max(n_per_id, 10), noise_std),
    )


def noise_attack_eval(world: ToyWorld, stack, forgotten, noise_std: float, rng, n: int = 50, sources=None) -> MetricReport:
    return evaluate(world, stack, forgotten, rng, sources=sources, n_per_id=n, noise_std=noise_std)


# theorem-level checks --------------------------------------------------------


def _fine_spec(spec: SolverSpec, dt: float = FINE_DT) -> SolverSpec:
    steps = max(1, round(spec.horizon / dt))
    return SolverSpec("rk4", steps, spec.horizon / steps)


def _adapter_inputs(world: ToyWorld, stack: AdapterStack, w: np.ndarray, stage: int) -> np.ndarray:
    """States entering the adapter at ``stage`` (upstream adapters applied)."""
    s = w
    for i, st in enumerate(world.stages):
        s = st.gain * np.tanh(s @ st.weight.T + st.bias)
        if i == stage:
            return s
        ad = stack.at(i)
        if ad is not None:
            s = ad.forward(s)[0]
    raise IndexError(stage)


@dataclass
class NonCrossingReport:
    passed: bool
    min_ratio: float  # min over pairs/times of dist_t / (exp(-L t) d0)
    min_margin: float  # min over pairs/times of dist_t
    violations: list = field(default_factory=list)  # (stage, pair, time)


def check_trajectory_noncrossing(world: ToyWorld, stack: AdapterStack, id_i: int, id_j: int, rng, n_pairs: int = 100, slack: float = 0.95) -> NonCrossingReport:
    """Fine-grid rk4 flows of paired samples from two identities never come together.

    Checks ``|Phi_t(x) - Phi_t(y)| >= slack * exp(-L t) |x - y|`` at every grid
    time for every Neural ODE adapter in the stack.
    """
    if id_i == id_j:
        raise ValueError("need two distinct identities")
    wi = sample_identity(world, rng, id_i, n_pairs)
    wj = sample_identity(world, rng, id_j, n_pairs)
    min_ratio, min_margin, violations = math.inf, math.inf, []
    for ad in stack.adapters:
        if not isinstance(ad, NodeAdapter):
            raise TypeError("non-crossing is a property of Neural ODE adapters")
        xi = _adapter_inputs(world, stack, wi, ad.stage)
        xj = _adapter_inputs(world, stack, wj, ad.stage)
        d0 = np.linalg.norm(xi - xj, axis=1)
        if np.any(d0 == 0.0):
            raise ValueError("identical starting states; pairs must be distinct")
        fine = _fine_spec(ad.spec)
        L = lipschitz_upper_bound(ad.params)
        ti = integrate(xi, ad.params, fine)
        tj = integrate(xj, ad.params, fine)
        dist = np.linalg.norm(ti.states - tj.states, axis=2)  # (steps+1, n_pairs)
        rel_t = ti.times - ti.times[0]
        ratio = dist / (np.exp(-L * rel_t)[:, None] * d0[None, :])
        min_ratio = min(min_ratio, float(ratio.min()))
        min_margin = min(min_margin, float(dist.min()))
        for step, pair in zip(*np.nonzero(ratio < slack)):
            violations.append((ad.stage, int(pair), float(rel_t[step])))
    return NonCrossingReport(not violations, min_ratio, min_margin, violations)


@dataclass
class SmoothnessReport:
    passed: bool
    max_ratio: float  # max of |dPhi| / (exp(L T) |dx0|)
    orders: list  # finite-difference convergence order per adapter (nan for a zero field)
    details: dict = field(default_factory=dict)


def check_smoothness(stack: AdapterStack, rng, n_pairs: int = 100, eps: float = 0.05, slack: float = 1.05, states=None, scale: float = 1.0) -> SmoothnessReport:
    """Forward Gronwall bound plus a second-order check on the flow Jacobian.

    For each Neural ODE adapter, random start pairs (or rows of ``states``)
    are integrated with rk4 at dt = 0.01. The central-difference Jacobian of
    the flow map at one point is compared to the exact one at ``eps`` and
    ``eps / 2``; for a C^1 flow the error ratio gives order ~2.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    max_ratio, orders, ok = 0.0, [], True
    for ad in stack.adapters:
        if not isinstance(ad, NodeAdapter):
            raise TypeError("smoothness is a property of Neural ODE adapters")
        dim = ad.params.dim
        if states is None:
            x = scale * rng.standard_normal((n_pairs, dim))
        else:
            x = np.asarray(states)[:n_pairs]
        dx = rng.standard_normal(x.shape)
        dx *= (0.1 * scale / np.linalg.norm(dx, axis=1))[:, None]
        y = x + dx
        fine = _fine_spec(ad.spec)
        L = lipschitz_upper_bound(ad.params)
        gap = np.linalg.norm(integrate(x, ad.params, fine).final - integrate(y, ad.params, fine).final, axis=1)
        ratio = gap / (math.exp(L * fine.horizon) * np.linalg.norm(dx, axis=1))
        max_ratio = max(max_ratio, float(ratio.max()))
        ok &= bool(ratio.max() <= slack)

        x0 = x[0]
        jac = flow_jacobian(x0, ad.params, fine)
        errs = []
        for h in (eps, eps / 2):
            fd = np.empty_like(jac)
            for c in range(dim):
                e = np.zeros(dim)
                e[c] = h
                fd[:, c] = (integrate(x0 + e, ad.params, fine).final - integrate(x0 - e, ad.params, fine).final) / (2 * h)
            errs.append(np.linalg.norm(fd - jac))
        if errs[1] == 0.0 or errs[0] < 1e-13:
            orders.append(math.nan)
        else:
            order = math.log2(errs[0] / errs[1])
            orders.append(order)
            ok &= 1.8 <= order <= 2.2
    return SmoothnessReport(bool(ok), max_ratio, orders)
