"""Neural vector field ``f(h, t) = W2 tanh(W1 [h; t] + b1) + b2``.

States may be a single vector of shape ``(dim,)`` or a batch ``(n, dim)``.
Parameter VJPs are summed over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import kaiming_uniform_init, spectral_norm

__all__ = [
    "FieldParams",
    "FieldEval",
    "field_eval",
    "vjp_state",
    "vjp_params",
    "init_adapter_params",
    "lipschitz_upper_bound",
    "save_params",
    "load_params",
]


@dataclass(frozen=True)
class FieldParams:
    w1: np.ndarray  # (hidden, dim + 1), last column multiplies t
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (dim, hidden)
    b2: np.ndarray  # (dim,)

    def __post_init__(self):
        hidden, cols = np.shape(self.w1)
        dim = cols - 1
        if np.shape(self.b1) != (hidden,) or np.shape(self.w2) != (dim, hidden) or np.shape(self.b2) != (dim,):
            raise ValueError(
                "inconsistent field shapes: "
                f"w1{np.shape(self.w1)} b1{np.shape(self.b1)} w2{np.shape(self.w2)} b2{np.shape(self.b2)}"
            )
        for block in self.blocks():
            if not np.all(np.isfinite(block)):
                raise ValueError("field parameters must be finite")

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w2.shape[1]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks())

    def blocks(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks()])

    @classmethod
    def from_vector(cls, vec, dim: int, hidden: int) -> "FieldParams":
        vec = np.asarray(vec, dtype=np.float64)
        sizes = [hidden * (dim + 1), hidden, dim * hidden, dim]
        if vec.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} values, got {vec.size}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return cls(
            parts[0].reshape(hidden, dim + 1).copy(),
            parts[1].copy(),
            parts[2].reshape(dim, hidden).copy(),
            parts[3].copy(),
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "FieldParams":
        return cls(np.zeros((hidden, dim + 1)), np.zeros(hidden), np.zeros((dim, hidden)), np.zeros(dim))

    def __add__(self, other: "FieldParams") -> "FieldParams":
        return FieldParams(*(a + b for a, b in zip(self.blocks(), other.blocks())))

    def scaled(self, c: float) -> "FieldParams":
        return FieldParams(*(c * b for b in self.blocks()))

    @property
    def w1_state(self) -> np.ndarray:
        return self.w1[:, :-1]


@dataclass(frozen=True)
class FieldEval:
    value: np.ndarray
    hidden_pre: np.ndarray
    hidden_post: np.ndarray


def _augment(h: np.ndarray, t: float) -> np.ndarray:
    if h.ndim == 1:
        return np.append(h, t)
    return np.concatenate([h, np.full((h.shape[0], 1), t)], axis=1)


def _check_state(h, p: FieldParams) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != p.dim or h.ndim > 2:
        raise ValueError(f"state shape {h.shape} does not match field dim {p.dim}")
    return h


def field_eval(h, t: float, p: FieldParams) -> FieldEval:
    h = _check_state(h, p)
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    pre = _augment(h, t) @ p.w1.T + p.b1
    post = np.tanh(pre)
    return FieldEval(post @ p.w2.T + p.b2, pre, post)


def _hidden_cotangent(ev: FieldEval, p: FieldParams, a: np.ndarray) -> np.ndarray:
    if a.shape != ev.value.shape:
        raise ValueError(f"cotangent shape {a.shape} does not match field output {ev.value.shape}")
    return (a @ p.w2) * (1.0 - ev.hidden_post**2)


def vjp_state(ev: FieldEval, h, t: float, p: FieldParams, a) -> np.ndarray:
    """``a^T df/dh`` evaluated at the cached point."""
    a = np.asarray(a, dtype=np.float64)
    return _hidden_cotangent(ev, p, a) @ p.w1_state


def vjp_params(ev: FieldEval, h, t: float, p: FieldParams, a) -> FieldParams:
    """Gradient of ``sum(a * f(h, t))`` with respect to every parameter block."""
    h = _check_state(h, p)
    a = np.asarray(a, dtype=np.float64)
    g = _hidden_cotangent(ev, p, a)
    hx = _augment(h, t)
    if h.ndim == 1:
        return FieldParams(np.outer(g, hx), g, np.outer(a, ev.hidden_post), a.copy())
    return FieldParams(g.T @ hx, g.sum(axis=0), a.T @ ev.hidden_post, a.sum(axis=0))


def init_adapter_params(rng: np.random.Generator, dim: int, hidden: int) -> FieldParams:
    """Kaiming-uniform first layer, zero output layer: the field starts at f == 0."""
    if dim < 1 or hidden < 1:
        raise ValueError(f"dim and hidden must be >= 1, got {dim}, {hidden}")
    w1 = kaiming_uniform_init(rng, hidden, dim + 1)
    bound = 1.0 / np.sqrt(dim + 1)
    b1 = rng.uniform(-bound, bound, size=hidden)
    return FieldParams(w1, b1, np.zeros((dim, hidden)), np.zeros(dim))


def lipschitz_upper_bound(p: FieldParams) -> float:
    """Global Lipschitz constant in ``h``: ``|W2|_2 |W1_state|_2`` since ``|tanh'| <= 1``."""
    s2 = spectral_norm(p.w2)
    if s2 == 0.0:
        return 0.0
    return s2 * spectral_norm(p.w1_state)


def save_params(path, p: FieldParams) -> None:
    """Text checkpoint: a ``dim hidden`` header, then w1, b1, w2, b2 one value per line."""
    lines = [f"{p.dim} {p.hidden}"]
    lines.extend(repr(float(x)) for x in p.to_vector())
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> FieldParams:
    rows = Path(path).read_text().split("\n")
    dim, hidden = (int(s) for s in rows[0].split())
    values = np.array([float(s) for s in rows[1:] if s.strip()])
    return FieldParams.from_vector(values, dim, hidden)
