import math

import numpy as np
import pytest

from conftest import central_diff, random_field, rel_err
from odeunlearn.numkit import make_rng
from odeunlearn.odeflow import (
    DivergenceError,
    SolverSpec,
    adjoint_gradient,
    backprop_trajectory,
    euler_step,
    flow_jacobian,
    integrate,
    midpoint_step,
    rk4_step,
    unrolled_gradient,
)
from odeunlearn.vecfield import FieldParams, init_adapter_params

METHODS = ["euler", "midpoint", "rk4"]


def linear(h, t):
    return h


def test_euler_step_examples():
    c = np.array([1.0, -2.0])
    assert np.array_equal(euler_step([0.5, 0.5], 0.0, lambda h, t: c, 0.1), [0.5 + 0.1, 0.5 - 0.2])
    assert np.array_equal(euler_step([3.0], 0.0, lambda h, t: np.zeros(1), 0.4), [3.0])
    assert euler_step(np.array([1.0]), 0.0, linear, 0.4)[0] == pytest.approx(1.4, abs=1e-15)


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        euler_step([1.0], 0.0, linear, 0.0)


def test_step_divergence():
    with pytest.raises(DivergenceError):
        euler_step([1.0], 0.0, lambda h, t: np.array([np.inf]), 0.1)


def test_higher_order_steps():
    zero = lambda h, t: np.zeros_like(h)
    for step in (midpoint_step, rk4_step):
        assert np.array_equal(step([2.0, -1.0], 0.0, zero, 0.3), [2.0, -1.0])
    assert abs(rk4_step([1.0], 0.0, linear, 0.1)[0] - math.exp(0.1)) < 1e-7
    assert midpoint_step([1.0], 0.0, linear, 0.1)[0] == pytest.approx(1.105, abs=1e-15)


def test_integrate_examples():
    traj = integrate([1.0], linear, SolverSpec("euler", 4, 0.4))
    assert traj.final[0] == pytest.approx(1.4**4, abs=1e-12)
    assert traj.final[0] == pytest.approx(3.8416, abs=1e-12)
    traj = integrate([1.0], linear, SolverSpec("rk4", 16, 0.1))
    # rk4 on h' = h multiplies by the degree-4 Taylor polynomial each step;
    # its global error against e^1.6 is 6.1e-6 at this step size
    amp = 1 + 0.1 + 0.1**2 / 2 + 0.1**3 / 6 + 0.1**4 / 24
    assert traj.final[0] == pytest.approx(amp**16, rel=1e-13)
    assert abs(traj.final[0] - math.exp(1.6)) < 1e-5
    assert traj.states.shape == (17, 1)
    assert np.all(np.diff(traj.times) > 0)


def test_integrate_divergence_names_step():
    spec = SolverSpec("euler", 50, 1.0)
    with pytest.raises(DivergenceError) as exc, np.errstate(over="ignore"):
        integrate([1.0], lambda h, t: np.where(np.abs(h) < 1e300, h * 1e200, np.inf), spec)
    assert exc.value.step is not None and "step" in str(exc.value)


def test_spec_validation():
    with pytest.raises(ValueError):
        SolverSpec("dopri5", 4, 0.1)
    with pytest.raises(ValueError):
        SolverSpec("euler", 0, 0.1)
    with pytest.raises(ValueError):
        SolverSpec("euler", 4, -0.1)
    assert SolverSpec().horizon == pytest.approx(1.6)


@pytest.mark.parametrize("method", METHODS)
def test_identity_at_init_bitwise(method, rng):
    p = init_adapter_params(rng, 6, 16)
    for steps, dt in [(1, 1.0), (4, 0.4), (16, 0.05)]:
        z0 = rng.standard_normal((5, 6)) * 3
        assert integrate(z0, p, SolverSpec(method, steps, dt)).final.tobytes() == z0.tobytes()


@pytest.mark.parametrize("method", METHODS)
def test_solver_order(method):
    order = {"euler": 1, "midpoint": 2, "rk4": 4}[method]
    errs = []
    for dt in (0.1, 0.05, 0.025):
        n = round(1.0 / dt)
        errs.append(abs(integrate([1.0], linear, SolverSpec(method, n, dt)).final[0] - math.e))
    for e1, e2 in zip(errs, errs[1:]):
        assert abs(e1 / e2 / 2**order - 1) < 0.2


def _linear_loss(p, spec, z0, c):
    return lambda v: c @ integrate(z0, FieldParams.from_vector(v, p.dim, p.hidden), spec).final


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("seed", range(3))
def test_unrolled_matches_fd(method, seed):
    r = make_rng(seed)
    dim, hidden = 8, 6
    p = random_field(r, dim, hidden, scale=0.4)
    spec = SolverSpec(method, 5, 0.2)
    z0, c = r.standard_normal(dim), r.standard_normal(dim)
    g = unrolled_gradient(z0, p, spec, c)
    fd = central_diff(_linear_loss(p, spec, z0, c), p.to_vector())
    assert rel_err(g.d_params.to_vector(), fd) < 1e-5
    fd0 = central_diff(lambda z: c @ integrate(z, p, spec).final, z0)
    assert rel_err(g.d_initial, fd0) < 1e-5


def test_unrolled_zero_field_identity_graph(rng):
    p = init_adapter_params(rng, 3, 4)
    e1 = np.array([1.0, 0.0, 0.0])
    g = unrolled_gradient(rng.standard_normal(3), p, SolverSpec("euler", 4, 0.4), e1)
    assert np.array_equal(g.d_initial, e1)


def test_unrolled_single_step_chain_rule(rng):
    p = random_field(rng, 3, 4)
    z0, c, dt = rng.standard_normal(3), rng.standard_normal(3), 0.3
    g = unrolled_gradient(z0, p, SolverSpec("euler", 1, dt), c)
    from odeunlearn.vecfield import field_eval, vjp_params, vjp_state

    ev = field_eval(z0, 0.0, p)
    np.testing.assert_allclose(g.d_initial, c + dt * vjp_state(ev, z0, 0.0, p, c), rtol=1e-14)
    np.testing.assert_allclose(g.d_params.to_vector(), dt * vjp_params(ev, z0, 0.0, p, c).to_vector(), rtol=1e-14)


def test_backprop_state_cotangents_match_fd(rng):
    p = random_field(rng, 4, 5)
    spec = SolverSpec("rk4", 3, 0.25)
    z0 = rng.standard_normal(4)
    w = rng.standard_normal((4, 4))

    def loss_of(v):
        q = FieldParams.from_vector(v, 4, 5)
        return float(np.sum(w * integrate(z0, q, spec).states))

    traj = integrate(z0, p, spec, record=True)
    g = backprop_trajectory(traj, p, state_cotangents=w)
    assert rel_err(g.d_params.to_vector(), central_diff(loss_of, p.to_vector())) < 1e-6


def test_adjoint_zero_field_golden():
    # dim 1, hidden 1: f == 0 so z stays 2 and a stays 1.5; the backward
    # Euler sweep samples tanh(0.5 z + 0.3 t + 0.1) at t = 1.0 and t = 0.5.
    p = FieldParams(np.array([[0.5, 0.3]]), np.array([0.1]), np.zeros((1, 1)), np.zeros(1))
    g = adjoint_gradient([2.0], p, SolverSpec("euler", 2, 0.5), [1.5])
    assert g.d_initial[0] == 1.5
    assert g.d_params.b2[0] == pytest.approx(1.5, abs=1e-15)  # T * dL/dzT
    assert g.d_params.w2[0, 0] == pytest.approx(1.3002264661198315, abs=1e-14)
    assert not np.any(g.d_params.w1) and not np.any(g.d_params.b1)
    u = unrolled_gradient([2.0], p, SolverSpec("euler", 2, 0.5), [1.5])
    assert u.d_params.w2[0, 0] == pytest.approx(1.2365869962886071, abs=1e-14)


def test_adjoint_parameter_free_integrand(rng):
    # every block enters f through w2 or b2; a zero cotangent kills the integrand
    p = random_field(rng, 3, 4)
    g = adjoint_gradient(rng.standard_normal(3), p, SolverSpec("rk4", 4, 0.1), np.zeros(3))
    assert not np.any(g.d_params.to_vector())


@pytest.mark.parametrize("method", METHODS)
def test_adjoint_converges_to_unrolled(method):
    r = make_rng(77)
    p = random_field(r, 8, 8, scale=0.2)
    z0, c = r.standard_normal(8), r.standard_normal(8)
    errs = []
    for n in (4, 8, 16, 32, 64):
        spec = SolverSpec(method, n, 1.0 / n)
        u = unrolled_gradient(z0, p, spec, c).d_params.to_vector()
        a = adjoint_gradient(z0, p, spec, c).d_params.to_vector()
        errs.append(rel_err(a, u))
    assert errs[-1] < 1e-2
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))


def test_flow_jacobian_matches_fd(rng):
    p = random_field(rng, 4, 6)
    spec = SolverSpec("rk4", 10, 0.1)
    z0 = rng.standard_normal(4)
    jac = flow_jacobian(z0, p, spec)
    for i in range(4):
        fd = central_diff(lambda z: integrate(z, p, spec).final[i], z0)
        assert rel_err(jac[i], fd) < 1e-7
