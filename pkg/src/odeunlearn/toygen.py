"""A small frozen generator with identity clusters and adapter insertion points.

The generator is ``x = S_L(... S_1(Map(z)))`` where ``Map`` is affine and each
synthesis stage is ``gain * tanh(W s + b)``. Identities are Gaussian clusters
around well separated centers in w-space. Adapters (Neural ODE flows or
low-rank residuals) sit after stages and are the only trainable parts.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .numkit import kaiming_uniform_init, make_rng, orthonormal_rows
from .odeflow import SolverSpec, Trajectory, adjoint_gradient, backprop_trajectory, integrate
from .vecfield import FieldParams, init_adapter_params

__all__ = [
    "WorldConfigError",
    "Stage",
    "ToyWorld",
    "NodeAdapter",
    "LowRankAdapter",
    "AdapterStack",
    "DiscreteAdapterStack",
    "build_toy_world",
    "map_latent",
    "sample_latents",
    "generate",
    "forward",
    "backward",
    "sample_identity",
    "init_node_stack",
    "init_discrete_stack",
    "identity_embed",
    "classify",
    "world_accuracy",
]

EMBED_DIM = 16


class WorldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    weight: np.ndarray
    bias: np.ndarray
    gain: float = 1.0

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class ToyWorld:
    map_weight: np.ndarray
    map_bias: np.ndarray
    stages: tuple
    centers: np.ndarray  # (k, latent_dim) in w-space
    cluster_std: float
    w_bar: np.ndarray
    w_scale: float  # per-coordinate std of Map(z)
    id_proj: np.ndarray  # identity embedding, orthonormal rows
    per_proj: np.ndarray  # perceptual stand-in embedding
    seed: int = 0
    id_centers: np.ndarray = field(default=None)  # identity embeddings of G(center_k)

    def __post_init__(self):
        if self.id_centers is None:
            x = generate(self, None, self.centers)
            object.__setattr__(self, "id_centers", identity_embed(self, x))

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.map_weight.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.stages[-1].out_dim

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(s.out_dim for s in self.stages)

    def config(self) -> dict:
        """The seeded recipe; worlds are rebuilt from this, never stored."""
        return {
            "seed": self.seed,
            "k": self.k,
            "latent_dim": self.latent_dim,
            "obs_dim": self.obs_dim,
            "cluster_std": self.cluster_std,
        }

    def checksum(self) -> str:
        h = hashlib.sha256()
        arrays = [self.map_weight, self.map_bias, self.centers, self.w_bar, self.id_proj, self.per_proj, self.id_centers]
        for s in self.stages:
            arrays += [s.weight, s.bias, np.array([s.gain])]
        for a in arrays:
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(repr((self.cluster_std, self.w_scale, self.seed)).encode())
        return h.hexdigest()


# adapters ------------------------------------------------------------------


@dataclass(frozen=True)
class NodeAdapter:
    stage: int
    params: FieldParams
    spec: SolverSpec

    @property
    def size(self) -> int:
        return self.params.size

    def to_vector(self) -> np.ndarray:
        return self.params.to_vector()

    def with_vector(self, vec) -> "NodeAdapter":
        return replace(self, params=FieldParams.from_vector(vec, self.params.dim, self.params.hidden))

    def forward(self, h, record: bool = False):
        traj = integrate(h, self.params, self.spec, record=record)
        return traj.final, traj

    def backward(self, traj: Trajectory, d_out, mode: str = "unrolled", state_cotangents=None):
        if mode == "adjoint":
            if state_cotangents is not None:
                raise ValueError("adjoint mode only takes a final-state cotangent")
            g = adjoint_gradient(traj.states[0], self.params, self.spec, d_out)
        else:
            g = backprop_trajectory(traj, self.params, d_final=d_out, state_cotangents=state_cotangents)
        return g.d_params.to_vector(), g.d_initial


@dataclass(frozen=True)
class LowRankAdapter:
    """Discrete residual ``h + A (B h + c)``; ``B = 0, c = 0`` is the identity."""

    stage: int
    up: np.ndarray  # A, (dim, rank)
    down: np.ndarray  # B, (rank, dim)
    bias: np.ndarray  # c, (rank,)

    @property
    def size(self) -> int:
        return self.up.size + self.down.size + self.bias.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.up.ravel(), self.down.ravel(), self.bias])

    def with_vector(self, vec) -> "LowRankAdapter":
        dim, rank = self.up.shape
        a, b, c = np.split(np.asarray(vec, dtype=np.float64), [dim * rank, 2 * dim * rank])
        return replace(self, up=a.reshape(dim, rank).copy(), down=b.reshape(rank, dim).copy(), bias=c.copy())

    def forward(self, h, record: bool = False):
        mid = h @ self.down.T + self.bias
        return h + mid @ self.up.T, (h, mid)

    def backward(self, cache, d_out, mode: str = "unrolled", state_cotangents=None):
        h, mid = cache
        d_mid = d_out @ self.up
        if h.ndim == 1:
            grads = [np.outer(d_out, mid), np.outer(d_mid, h), d_mid]
        else:
            grads = [d_out.T @ mid, d_mid.T @ h, d_mid.sum(axis=0)]
        return np.concatenate([g.ravel() for g in grads]), d_out + d_mid @ self.down


@dataclass(frozen=True)
class AdapterStack:
    adapters: tuple = ()

    def __post_init__(self):
        stages = [a.stage for a in self.adapters]
        if len(set(stages)) != len(stages):
            raise ValueError(f"at most one adapter per stage, got stages {stages}")

    def at(self, stage: int):
        for a in self.adapters:
            if a.stage == stage:
                return a
        return None

    @property
    def size(self) -> int:
        return sum(a.size for a in self.adapters)

    def to_vector(self) -> np.ndarray:
        if not self.adapters:
            return np.zeros(0)
        return np.concatenate([a.to_vector() for a in self.adapters])

    def with_vector(self, vec) -> "AdapterStack":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {vec.size}")
        parts = np.split(vec, np.cumsum([a.size for a in self.adapters])[:-1])
        return type(self)(tuple(a.with_vector(p) for a, p in zip(self.adapters, parts)))

    def offsets(self) -> dict[int, slice]:
        out, start = {}, 0
        for a in self.adapters:
            out[a.stage] = slice(start, start + a.size)
            start += a.size
        return out


class DiscreteAdapterStack(AdapterStack):
    """Stack of low-rank residual adapters (the discrete baseline)."""


def init_node_stack(world: ToyWorld, rng, hidden: int = 32, spec: SolverSpec | None = None, stages=None) -> AdapterStack:
    spec = spec or SolverSpec()
    stages = range(len(world.stages)) if stages is None else stages
    return AdapterStack(tuple(NodeAdapter(i, init_adapter_params(rng, world.stage_dims[i], hidden), spec) for i in stages))


def init_discrete_stack(world: ToyWorld, rng, rank: int = 4, stages=None) -> DiscreteAdapterStack:
    stages = range(len(world.stages)) if stages is None else stages
    adapters = []
    for i in stages:
        dim = world.stage_dims[i]
        adapters.append(LowRankAdapter(i, kaiming_uniform_init(rng, dim, rank), np.zeros((rank, dim)), np.zeros(rank)))
    return DiscreteAdapterStack(tuple(adapters))


# generator -----------------------------------------------------------------


def map_latent(world: ToyWorld, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != world.latent_dim:
        raise ValueError(f"latent has dim {z.shape[-1]}, world expects {world.latent_dim}")
    return z @ world.map_weight.T + world.map_bias


def sample_latents(world: ToyWorld, rng, n: int) -> np.ndarray:
    """``n`` retain-distribution latents ``Map(z)`` with Gaussian ``z``."""
    return map_latent(world, rng.standard_normal((n, world.latent_dim)))


@dataclass
class Tape:
    tanh: list  # per-stage tanh activations
    caches: list  # per-stage adapter cache or None


def forward(world: ToyWorld, stack: AdapterStack | None, w, record: bool = False):
    """Run the generator; returns ``(x, tape)`` for a later :func:`backward`."""
    s = np.asarray(w, dtype=np.float64)
    if s.shape[-1] != world.latent_dim:
        raise ValueError(f"latent has dim {s.shape[-1]}, world expects {world.latent_dim}")
    tape = Tape([], [])
    for i, stage in enumerate(world.stages):
        th = np.tanh(s @ stage.weight.T + stage.bias)
        s = stage.gain * th
        tape.tanh.append(th)
        ad = stack.at(i) if stack is not None else None
        cache = None
        if ad is not None:
            s, cache = ad.forward(s, record=record)
        tape.caches.append(cache)
    return s, tape


def backward(world: ToyWorld, stack: AdapterStack, tape: Tape, d_x, mode: str = "unrolled", state_cotangents=None):
    """Adapter-parameter gradient given ``dL/dx``.

    ``state_cotangents`` maps a stage index to extra ``dL/dh_n`` terms on
    that adapter's trajectory (used by the trajectory-consistency loss).
    """
    grad = np.zeros(stack.size)
    offsets = stack.offsets()
    ds = np.asarray(d_x, dtype=np.float64)
    extra = state_cotangents or {}
    for i in range(len(world.stages) - 1, -1, -1):
        ad = stack.at(i)
        if ad is not None:
            g, ds = ad.backward(tape.caches[i], ds, mode=mode, state_cotangents=extra.get(i))
            grad[offsets[i]] += g
        if i == 0 or not any(a.stage < i for a in stack.adapters):
            break
        stage = world.stages[i]
        ds = (ds * stage.gain * (1.0 - tape.tanh[i] ** 2)) @ stage.weight
    return grad


def generate(world: ToyWorld, stack: AdapterStack | None, w) -> np.ndarray:
    return forward(world, stack, w)[0]


def sample_identity(world: ToyWorld, rng, ident: int, n: int | None = None) -> np.ndarray:
    """Draw from identity ``ident``'s cluster: ``center + cluster_std * N(0, I)``."""
    if not 0 <= ident < world.k:
        raise IndexError(f"identity {ident} out of range for k={world.k}")
    shape = (world.latent_dim,) if n is None else (n, world.latent_dim)
    noise = rng.standard_normal(shape)
    if world.cluster_std == 0:
        return np.broadcast_to(world.centers[ident], shape).copy()
    return world.centers[ident] + world.cluster_std * noise


def identity_embed(world: ToyWorld, x) -> np.ndarray:
    return np.asarray(x) @ world.id_proj.T


def classify(world: ToyWorld, x) -> np.ndarray:
    """Nearest identity center in the identity-embedding space."""
    e = np.atleast_2d(identity_embed(world, x))
    d2 = ((e[:, None, :] - world.id_centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


# construction ----------------------------------------------------------------


def _calibrated_stage(rng, inputs: np.ndarray, out_dim: int, gain: float) -> Stage:
    in_dim = inputs.shape[1]
    w = rng.standard_normal((out_dim, in_dim))
    b = 0.1 * rng.standard_normal(out_dim)
    # scale so pre-activations have unit spread over the latent distribution
    spread = np.std(inputs @ w.T)
    return Stage(w / spread, b, gain)


def build_toy_world(
    seed: int = 0,
    k: int = 8,
    latent_dim: int = 8,
    obs_dim: int = 32,
    cluster_std: float = 0.3,
    stage_dims: tuple[int, ...] | None = None,
    gain: float = 4.0,
    spacing: float = 10.0,
    gate: bool = True,
) -> ToyWorld:
    """Deterministically build a world from its seeded recipe.

    Identity centers are typical latents ``Map(z)``, rejection-sampled to sit
    ``spacing * cluster_std`` apart where possible; if that fails they are
    pushed away from ``w_bar`` until every pair is at least ``6 *
    cluster_std`` apart.
    With ``gate`` the world must also classify fresh identity samples to
    their own center at >= 99% accuracy.
    """
    if k < 2 or latent_dim < 2 or obs_dim < 2:
        raise WorldConfigError(f"need k >= 2 and dims >= 2, got k={k}, latent_dim={latent_dim}, obs_dim={obs_dim}")
    if not cluster_std >= 0:
        raise WorldConfigError(f"cluster_std must be >= 0, got {cluster_std}")
    rng = make_rng(seed)
    q = orthonormal_rows(rng, latent_dim, latent_dim)
    map_weight = q
    map_bias = 0.1 * rng.standard_normal(latent_dim)

    probe = rng.standard_normal((10_000, latent_dim)) @ map_weight.T + map_bias
    w_bar = probe.mean(axis=0)
    w_scale = float(probe.std(axis=0).mean())

    if stage_dims is None:
        stage_dims = (max(2, obs_dim // 2), obs_dim)
    if stage_dims[-1] != obs_dim:
        raise WorldConfigError(f"last stage dim {stage_dims[-1]} != obs_dim {obs_dim}")
    stages = []
    act = probe[:2000]
    for i, dim in enumerate(stage_dims):
        st = _calibrated_stage(rng, act, dim, gain)
        stages.append(st)
        act = st.gain * np.tanh(act @ st.weight.T + st.bias)

    centers = _draw_centers(rng, k, map_weight, map_bias, spacing * cluster_std)
    need = 6.0 * cluster_std
    min_sep = _min_separation(centers)
    if min_sep < need:
        if not min_sep > 0:
            raise WorldConfigError("identity centers coincide; separation is unachievable")
        centers = w_bar + (centers - w_bar) * (need / min_sep) * 1.05
    if not np.all(np.isfinite(centers)) or _min_separation(centers) < need:
        raise WorldConfigError(f"cannot separate {k} centers by {need}")

    emb = min(EMBED_DIM, obs_dim)
    world = ToyWorld(
        map_weight=map_weight,
        map_bias=map_bias,
        stages=tuple(stages),
        centers=centers,
        cluster_std=float(cluster_std),
        w_bar=w_bar,
        w_scale=w_scale,
        id_proj=orthonormal_rows(rng, emb, obs_dim),
        per_proj=orthonormal_rows(rng, emb, obs_dim),
        seed=int(seed),
    )
    if gate:
        acc = world_accuracy(world, make_rng(seed + 1), 200)
        if acc < 0.99:
            raise WorldConfigError(f"world is not well posed: nearest-center accuracy {acc:.4f} < 0.99")
    return world


def _min_separation(centers: np.ndarray) -> float:
    d = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    return float(d[np.triu_indices(len(centers), 1)].min())


def _draw_centers(rng, k, map_weight, map_bias, min_dist, tries: int = 200) -> np.ndarray:
    latent_dim = map_weight.shape[1]
    centers = []
    for _ in range(k):
        for _ in range(tries):
            c = rng.standard_normal(latent_dim) @ map_weight.T + map_bias
            if all(np.linalg.norm(c - o) >= min_dist for o in centers):
                break
        centers.append(c)
    return np.array(centers)


def world_accuracy(world: ToyWorld, rng, n_per_id: int) -> float:
    hits = 0
    for ident in range(world.k):
        x = generate(world, None, sample_identity(world, rng, ident, n_per_id))
        hits += int(np.sum(classify(world, x) == ident))
    return hits / (world.k * n_per_id)
