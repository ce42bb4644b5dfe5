import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbse.estimator import (ObservabilityError, SolverOptions, StateVector, WlsProblem,
                            pseudo_from_un, un, wls)
from lbse.measurements import (Availability, Kind, MeasurementPlan, MeasurementSpec, default_plan,
                               eval_h, eval_jacobian)

from conftest import random_state

seeds = st.integers(0, 2**32 - 1)


@pytest.fixture(scope="module")
def plan(net33):
    return default_plan(net33)


def noisy(plan, adm, seed):
    rng = np.random.default_rng(seed)
    x = random_state(rng, 33)
    return x, eval_h(x, plan, adm) + rng.normal(0, plan.sigmas)


@settings(max_examples=8, deadline=None)
@given(seeds)
def test_noise_free_recovery(plan, adm33, seed):
    x = random_state(np.random.default_rng(seed), 33)
    rep = wls(WlsProblem(eval_h(x, plan, adm33), plan), adm33)
    assert rep.converged
    assert np.max(np.abs(rep.x_hat.free(0) - x.free(0))) <= 1e-6


def test_start_at_optimum(plan, adm33):
    z = eval_h(StateVector.flat(33), plan, adm33)
    rep = wls(WlsProblem(z, plan), adm33)
    assert rep.converged and rep.iterations <= 2 and rep.objective <= 1e-16


def test_noisy_solve_is_stationary(plan, adm33):
    x, z = noisy(plan, adm33, 4)
    rep = wls(WlsProblem(z, plan), adm33)
    # with sigma = 0.001 rows the gradient bottoms out at round-off, so the
    # step test is what ends the iteration
    assert rep.converged and (rep.grad_norm <= 1e-8 or rep.step_norm <= 1e-10)
    # weighted SSE of a correct fit is about m - (2n - 1) in expectation
    assert 1.0 < rep.objective < 60.0


def test_descent_and_determinism(plan, adm33):
    _, z = noisy(plan, adm33, 9)
    a = wls(WlsProblem(z, plan), adm33)
    b = wls(WlsProblem(z, plan), adm33)
    objs = [t[1] for t in a.trace]
    assert all(o2 <= o1 for o1, o2 in zip(objs, objs[1:]))
    assert np.array_equal(a.x_hat.v, b.x_hat.v) and np.array_equal(a.x_hat.theta, b.x_hat.theta)
    assert (a.objective, a.iterations, a.trace) == (b.objective, b.iterations, b.trace)


def test_trace_csv(plan, adm33):
    _, z = noisy(plan, adm33, 1)
    text = wls(WlsProblem(z, plan), adm33).trace_csv()
    lines = text.splitlines()
    assert lines[0] == "iteration,objective,lambda,step_norm"
    assert lines[1].startswith("1,")


def test_too_few_measurements(plan, adm33):
    with pytest.raises(ObservabilityError, match="un"):
        wls(WlsProblem(np.zeros(plan.m_a), plan.available), adm33)


def test_rank_deficient_plan(adm33):
    specs = [MeasurementSpec("vmag", k, 0.001, a) for k in range(1, 34)
             for a in (Availability.REALTIME, Availability.DELAYED)]
    plan = MeasurementPlan(tuple(specs))
    with pytest.raises(ObservabilityError, match="rank"):
        wls(WlsProblem(np.full(len(plan), 1.01), plan), adm33)


def test_iteration_cap_flags_report(plan, adm33):
    _, z = noisy(plan, adm33, 2)
    rep = wls(WlsProblem(z, plan), adm33, SolverOptions(max_iter=1))
    assert not rep.converged and rep.iterations == 1


def test_problem_validation(plan):
    with pytest.raises(ValueError):
        WlsProblem(np.zeros(3), plan)
    with pytest.raises(ValueError):
        WlsProblem(np.zeros(len(plan)), plan, weights=np.zeros(len(plan)))


def test_angles_wrapped(adm33):
    plan = MeasurementPlan(tuple(MeasurementSpec(k, b, 0.01) for k in ("vmag", "pinj", "qinj")
                                 for b in range(1, 34)))
    x = random_state(np.random.default_rng(0), 33)
    shifted = StateVector(x.v, np.where(np.arange(33) == 0, 0.0, x.theta + 2 * np.pi))
    rep = wls(WlsProblem(eval_h(x, plan, adm33), plan, init=shifted), adm33)
    assert rep.converged
    assert np.all(np.abs(rep.x_hat.theta) <= np.pi)
    assert np.allclose(rep.x_hat.theta, x.theta, atol=1e-9)


# -- underdetermined problem ----------------------------------------------------

@settings(max_examples=8, deadline=None)
@given(seeds)
def test_un_reaches_zero(plan, adm33, seed):
    x, z = noisy(plan, adm33, seed)
    rep = un(z[:plan.m_a], plan.available, adm33)
    assert rep.converged and rep.objective <= 1e-10
    assert rep.x_hat.theta[0] == 0.0


def test_un_identity_rows_leave_rest_at_init(adm33):
    specs = [MeasurementSpec("vmag", k, 0.001) for k in range(1, 33)] + \
            [MeasurementSpec("vang", k, 0.001) for k in range(2, 33)]
    plan = MeasurementPlan(tuple(specs))
    x = random_state(np.random.default_rng(8), 33)
    rep = un(eval_h(x, plan, adm33), plan, adm33)
    assert np.allclose(rep.x_hat.v[:32], x.v[:32], atol=1e-12)
    assert np.allclose(rep.x_hat.theta[:32], x.theta[:32], atol=1e-12)
    assert rep.x_hat.v[32] == 1.0 and rep.x_hat.theta[32] == 0.0


def test_un_step_is_minimum_norm(plan, adm33):
    _, z = noisy(plan, adm33, 6)
    flat = StateVector.flat(33)
    rep = un(z[:plan.m_a], plan.available, adm33, options=SolverOptions(max_iter=1))
    dx = rep.x_hat.free(0) - flat.free(0)
    J = eval_jacobian(flat, plan.available, adm33) / plan.available.sigmas[:, None]
    _, s, vt = np.linalg.svd(J)
    rank = int(np.sum(s > 1e-10 * s[0]))
    null = vt[rank:]
    assert null.shape[0] == 65 - plan.m_a
    assert np.max(np.abs(null @ dx)) <= 1e-8 * max(1.0, np.max(np.abs(dx)))


def test_un_deterministic(plan, adm33):
    _, z = noisy(plan, adm33, 12)
    a = un(z[:plan.m_a], plan.available, adm33)
    b = un(z[:plan.m_a], plan.available, adm33)
    assert np.array_equal(a.x_hat.free(0), b.x_hat.free(0))


def test_pseudo_from_true_state(plan, adm33):
    x = random_state(np.random.default_rng(3), 33)
    assert np.array_equal(pseudo_from_un(x, plan.delayed, adm33), eval_h(x, plan.delayed, adm33))


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e4])
def test_pseudo_measurements_are_consistent(plan, adm33, scale):
    _, z = noisy(plan, adm33, 21)
    x_t = un(z[:plan.m_a], plan.available, adm33).x_hat
    pseudo = pseudo_from_un(x_t, plan.delayed, adm33)
    w = np.concatenate([plan.available.weights, np.full(plan.m_d, scale)])
    rep = wls(WlsProblem(np.concatenate([z[:plan.m_a], pseudo]), plan, w), adm33)
    assert rep.converged and rep.objective <= 1e-10
    assert np.allclose(eval_h(rep.x_hat, plan, adm33), np.concatenate([z[:plan.m_a], pseudo]),
                       atol=1e-7)



@pytest.mark.parametrize("seed", [1, 12, 14, 39])
def test_relative_damping_escapes_spurious_minimum(net33, adm33, seed):
    # heavily weighted real-time rows plus loose pseudo rows: with an absolute
    # lambda0 the first undamped steps from flat start land in a wrong basin
    plan = default_plan(net33, n_pmu=5, n_scada=25)
    x = random_state(np.random.default_rng(seed), 33)
    z = eval_h(x, plan, adm33)
    w = plan.weights.copy()
    w[plan.m_a:] = 0.5
    absolute = wls(WlsProblem(z, plan, w), adm33, SolverOptions(relative_damping=False))
    assert np.max(np.abs(absolute.x_hat.free(0) - x.free(0))) > 0.1
    rep = wls(WlsProblem(z, plan, w), adm33)
    assert rep.converged and rep.objective <= 1e-12
    assert np.max(np.abs(rep.x_hat.free(0) - x.free(0))) <= 1e-9
