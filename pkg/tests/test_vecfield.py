import numpy as np
import pytest

from conftest import central_diff, random_field, rel_err
from odeunlearn.numkit import make_rng
from odeunlearn.vecfield import (
    FieldParams,
    field_eval,
    init_adapter_params,
    lipschitz_upper_bound,
    load_params,
    save_params,
    vjp_params,
    vjp_state,
)


def test_zero_output_layer_gives_zero_field(rng):
    p = random_field(rng, 4, 6)
    p = FieldParams(p.w1, p.b1, np.zeros((4, 6)), np.zeros(4))
    for _ in range(10):
        assert np.array_equal(field_eval(rng.standard_normal(4), rng.standard_normal(), p).value, np.zeros(4))


def test_constant_field():
    c = np.array([0.3, -1.2])
    p = FieldParams(np.zeros((3, 3)), np.zeros(3), np.ones((2, 3)), c)
    assert np.array_equal(field_eval([5.0, -2.0], 0.7, p).value, c)


def test_hand_evaluated_field():
    p = FieldParams(
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        np.array([0.0, 0.5]),
        np.array([[1.0, 0.0], [0.0, 2.0]]),
        np.array([0.1, -0.1]),
    )
    # tanh(1) + 0.1, 2 tanh(0.5) - 0.1
    got = field_eval([1.0, 0.0], 0.0, p).value
    np.testing.assert_allclose(got, [0.8615941559557648, 0.8242343145200195], rtol=0, atol=1e-15)


def test_shape_checks(rng):
    p = random_field(rng, 3, 4)
    with pytest.raises(ValueError):
        field_eval(np.zeros(2), 0.0, p)
    ev = field_eval(np.zeros(3), 0.0, p)
    with pytest.raises(ValueError):
        vjp_state(ev, np.zeros(3), 0.0, p, np.zeros(2))
    with pytest.raises(ValueError):
        FieldParams(np.zeros((4, 4)), np.zeros(3), np.zeros((3, 4)), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_vjp_state_matches_fd(seed):
    r = make_rng(seed)
    p = random_field(r, 8, 12)
    h, t, a = r.standard_normal(8), r.standard_normal(), r.standard_normal(8)
    ev = field_eval(h, t, p)
    fd = central_diff(lambda x: a @ field_eval(x, t, p).value, h)
    assert rel_err(vjp_state(ev, h, t, p, a), fd) < 1e-6


def test_vjp_state_zero_output_layer(rng):
    p = init_adapter_params(rng, 5, 7)
    h = rng.standard_normal(5)
    ev = field_eval(h, 0.2, p)
    assert np.array_equal(vjp_state(ev, h, 0.2, p, rng.standard_normal(5)), np.zeros(5))


def test_vjp_state_linear_regime(rng):
    dim, hidden = 6, 5
    p = random_field(rng, dim, hidden)
    p = FieldParams(1e-10 * p.w1, np.zeros(hidden), p.w2, p.b2)
    h, a = rng.standard_normal(dim), rng.standard_normal(dim)
    ev = field_eval(h, 0.0, p)
    assert np.linalg.norm(ev.hidden_pre) < 1e-8
    linear = (p.w2 @ p.w1_state).T @ a
    assert rel_err(vjp_state(ev, h, 0.0, p, a), linear) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_vjp_params_matches_fd(seed):
    r = make_rng(100 + seed)
    p = random_field(r, 8, 10)
    h, t, a = r.standard_normal(8), r.standard_normal(), r.standard_normal(8)
    ev = field_eval(h, t, p)
    got = vjp_params(ev, h, t, p, a).to_vector()

    def fun(v):
        return a @ field_eval(h, t, FieldParams.from_vector(v, 8, 10)).value

    fd = central_diff(fun, p.to_vector())
    assert rel_err(got, fd) < 1e-6
    # block-wise as well
    gp = FieldParams.from_vector(got, 8, 10)
    fp = FieldParams.from_vector(fd, 8, 10)
    for g, f in zip(gp.blocks(), fp.blocks()):
        assert rel_err(g, f) < 1e-6


def test_vjp_params_trivial_cases(rng):
    p = random_field(rng, 3, 4)
    h = rng.standard_normal(3)
    ev = field_eval(h, 0.5, p)
    zero = vjp_params(ev, h, 0.5, p, np.zeros(3))
    assert not np.any(zero.to_vector())
    a = rng.standard_normal(3)
    assert np.array_equal(vjp_params(ev, h, 0.5, p, a).b2, a)


def test_batched_vjps_sum_over_rows(rng):
    p = random_field(rng, 4, 5)
    hs, a = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    ev = field_eval(hs, 0.3, p)
    total = vjp_params(ev, hs, 0.3, p, a).to_vector()
    single = sum(vjp_params(field_eval(h, 0.3, p), h, 0.3, p, ai).to_vector() for h, ai in zip(hs, a))
    np.testing.assert_allclose(total, single, rtol=1e-12, atol=1e-14)
    rows = vjp_state(ev, hs, 0.3, p, a)
    for h, ai, row in zip(hs, a, rows):
        np.testing.assert_allclose(row, vjp_state(field_eval(h, 0.3, p), h, 0.3, p, ai), rtol=1e-12, atol=1e-14)


def test_fd_convergence_order_two(rng):
    p = random_field(rng, 4, 6)
    h, a = rng.standard_normal(4), rng.standard_normal(4)
    exact = vjp_state(field_eval(h, 0.1, p), h, 0.1, p, a)
    errs = [np.linalg.norm(central_diff(lambda x: a @ field_eval(x, 0.1, p).value, h, eps) - exact) for eps in (1e-2, 5e-3)]
    assert 1.8 < np.log2(errs[0] / errs[1]) < 2.2


def test_init_adapter_params(rng):
    p = init_adapter_params(rng, 4, 256)
    assert p.b1.shape == (256,)
    assert not np.any(p.w2) and not np.any(p.b2)
    assert np.all(np.abs(p.w1) <= np.sqrt(6 / 5))
    for _ in range(100):
        assert not np.any(field_eval(rng.standard_normal(4), rng.uniform(-5, 5), p).value)


def test_lipschitz_bound_cases(rng):
    assert lipschitz_upper_bound(init_adapter_params(rng, 3, 3)) == 0.0
    d = 3
    p = FieldParams(np.hstack([np.eye(d), np.zeros((d, 1))]), np.zeros(d), 2 * np.eye(d), np.zeros(d))
    assert lipschitz_upper_bound(p) == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_lipschitz_bound_dominates_sampled_ratios(seed):
    r = make_rng(seed)
    p = random_field(r, 6, 8, scale=1.0)
    bound = lipschitz_upper_bound(p)
    h1 = r.standard_normal((10_000, 6)) * 2
    h2 = h1 + r.standard_normal((10_000, 6)) * r.uniform(1e-3, 2, size=(10_000, 1))
    t = r.uniform(-2, 2)
    ratio = np.linalg.norm(field_eval(h1, t, p).value - field_eval(h2, t, p).value, axis=1) / np.linalg.norm(h1 - h2, axis=1)
    assert ratio.max() <= bound


def test_serialization_round_trip(tmp_path, rng):
    p = random_field(rng, 5, 3)
    path = tmp_path / "adapter_0.params"
    save_params(path, p)
    q = load_params(path)
    assert q.to_vector().tobytes() == p.to_vector().tobytes()
    assert path.read_text().splitlines()[0] == "5 3"
