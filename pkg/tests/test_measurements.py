import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbse.measurements import (Availability, Kind, MeasurementPlan, MeasurementSpec, PlanError,
                               StateVector, default_plan, eval_h, eval_jacobian, ftu_branch,
                               full_index, full_jacobian, full_labels, full_outputs)

from conftest import random_state

seeds = st.integers(0, 2**32 - 1)


def every_row_plan(net):
    specs = []
    for kind in Kind:
        count = net.n_branch if kind.is_branch else net.n_bus
        specs += [MeasurementSpec(kind, k, 0.01) for k in range(1, count + 1)]
    return MeasurementPlan(tuple(specs))


def oracle_outputs(net, state):
    """Branch-by-branch complex arithmetic, independent of the admittance matrix."""
    V = state.v * np.exp(1j * state.theta)
    S = np.zeros(net.n_bus, dtype=complex)
    Sf = []
    for br in net.active_branches:
        i, j = net.index(br.from_bus), net.index(br.to_bus)
        y = 1 / complex(br.r, br.x)
        s_ij = V[i] * np.conj((V[i] - V[j]) * y + 0.5j * br.b_sh * V[i])
        s_ji = V[j] * np.conj((V[j] - V[i]) * y + 0.5j * br.b_sh * V[j])
        S[i] += s_ij
        S[j] += s_ji
        Sf.append(s_ij)
    for b in net.buses:
        k = net.index(b.id)
        S[k] += abs(V[k]) ** 2 * np.conj(b.gs + 1j * b.bs)
    Sf = np.array(Sf)
    return np.concatenate([state.v, state.theta, S.real, S.imag, Sf.real, Sf.imag])


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_outputs_match_complex_oracle(toy3, seed):
    net, adm = toy3
    state = random_state(np.random.default_rng(seed), net.n_bus)
    assert np.max(np.abs(full_outputs(state, adm) - oracle_outputs(net, state))) <= 1e-12


def test_two_bus_flow_oracle(toy2):
    net, adm = toy2
    state = StateVector(np.array([1.02, 0.97]), np.array([0.0, -0.05]))
    V = state.v * np.exp(1j * state.theta)
    br = net.branches[0]
    y = 1 / complex(br.r, br.x)
    s12 = V[0] * np.conj((V[0] - V[1]) * y + 0.5j * br.b_sh * V[0])
    plan = MeasurementPlan((MeasurementSpec("pflow", 1, 0.01), MeasurementSpec("qflow", 1, 0.01)))
    assert np.allclose(eval_h(state, plan, adm), [s12.real, s12.imag], atol=1e-12, rtol=0)


def test_flat_state_flows(net33, adm33):
    out = full_outputs(StateVector.flat(33), adm33)
    n, nb = 33, adm33.n_branch
    assert np.all(out[4 * n:4 * n + nb] == 0.0)
    assert np.allclose(out[4 * n + nb:], -adm33.branch_b_sh / 2, atol=1e-15)
    assert np.abs(out[2 * n:3 * n]).max() < 1e-10   # zero-shunt feeder


def test_flat_state_charging(toy3):
    net, adm = toy3
    out = full_outputs(StateVector.flat(3), adm)
    qf = out[4 * 3 + 3:]
    assert np.allclose(qf, [-0.015, -0.01, 0.0], atol=1e-15)


def test_voltage_rows_are_identity(net33, adm33):
    plan = MeasurementPlan((MeasurementSpec("vmag", 7, 0.001), MeasurementSpec("vang", 7, 0.001)))
    J = eval_jacobian(random_state(np.random.default_rng(3), 33), plan, adm33)
    expect = np.zeros((2, 65))
    expect[0, 6] = 1.0
    expect[1, 33 + 5] = 1.0  # theta columns skip the slack
    assert np.array_equal(J, expect)


def _fd_jacobian(state, adm, h=1e-6):
    x0 = state.free(adm.slack)
    cols = []
    for j in range(len(x0)):
        e = np.zeros_like(x0)
        e[j] = h
        up = full_outputs(StateVector.from_free(x0 + e, adm.slack), adm)
        dn = full_outputs(StateVector.from_free(x0 - e, adm.slack), adm)
        cols.append((up - dn) / (2 * h))
    return np.array(cols).T


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_jacobian_matches_finite_differences(net33, adm33, seed):
    state = random_state(np.random.default_rng(seed), 33)
    J = full_jacobian(state, adm33)
    fd = _fd_jacobian(state, adm33)
    assert np.max(np.abs(J - fd) / np.maximum(np.abs(J), 1.0)) <= 1e-5


def test_jacobian_with_shunts(toy3):
    net, adm = toy3
    state = random_state(np.random.default_rng(11), 3)
    J = full_jacobian(state, adm)
    assert np.max(np.abs(J - _fd_jacobian(state, adm))) <= 1e-7


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_angle_shift_invariance(net33, adm33, seed):
    state = random_state(np.random.default_rng(seed), 33)
    plan = default_plan(net33)
    plan = MeasurementPlan(tuple(s for s in plan.specs if s.kind is not Kind.VANG))
    shifted = StateVector(state.v, state.theta + 2 * np.pi)
    assert np.allclose(eval_h(state, plan, adm33), eval_h(shifted, plan, adm33), atol=1e-9)


def test_h_and_jacobian_share_rows(net33, adm33):
    plan = default_plan(net33)
    state = random_state(np.random.default_rng(5), 33)
    rows = plan.rows(33, adm33.n_branch)
    assert np.array_equal(eval_h(state, plan, adm33), full_outputs(state, adm33)[rows])
    assert np.array_equal(eval_jacobian(state, plan, adm33), full_jacobian(state, adm33)[rows])
    labels = full_labels(33, adm33.n_branch)
    assert [labels[r] for r in rows] == plan.labels


# -- plans -------------------------------------------------------------------

def test_default_plan_counts(net33):
    plan = default_plan(net33, n_pmu=5, n_scada=15)
    assert (plan.m_a, plan.m_d) == (43, 36)
    assert len(plan) == 79


def test_default_plan_sensor_layout(net33):
    plan = default_plan(net33)
    meters = sorted({s.location for s in plan.delayed.specs})
    assert meters == [1, 4, 7, 10, 11, 14, 16, 18, 19, 20, 22, 23, 25, 26, 27, 28, 30, 32]
    pmus = sorted({s.location for s in plan.available.specs if s.kind is Kind.VANG})
    assert pmus == [3, 9, 15, 21, 29]
    assert plan.specs[:3] == (MeasurementSpec("vmag", 1, 0.001), MeasurementSpec("pflow", 1, 0.01),
                              MeasurementSpec("qflow", 1, 0.01))
    assert {s.sigma for s in plan.specs if s.kind.is_power} == {0.01}
    assert {s.sigma for s in plan.specs if not s.kind.is_power} == {0.001}


def test_swapped_counts(net33):
    assert (default_plan(net33, 15, 5).m_a, default_plan(net33, 15, 5).m_d) == (43, 56)
    plan = default_plan(net33, 15, 5, slack_meter=False)
    assert (plan.m_a, plan.m_d) == (43, 54)


def test_all_scada_degenerate(net33):
    plan = default_plan(net33, n_pmu=0, n_scada=32, slack_meter=False)
    assert (plan.m_a, plan.m_d) == (3 + 2 * 32, 0)


def test_ftu_branch(net33):
    assert ftu_branch(net33) == 1


@pytest.mark.parametrize("kwargs, msg", [
    (dict(n_pmu=20, n_scada=15), "do not fit"),
    (dict(placement={"scada": [1] + list(range(2, 16))}), "slack"),
    (dict(placement={"meters": [2, 4]}), "both SCADA and smart-meter"),
    (dict(placement={"pmu": [2, 3]}), "length"),
])
def test_plan_errors(net33, kwargs, msg):
    with pytest.raises(PlanError, match=msg):
        default_plan(net33, **kwargs)


def test_explicit_placement(net33):
    plan = default_plan(net33, n_pmu=1, n_scada=1,
                        placement={"scada": [5], "pmu": [9], "meters": [2, 3]})
    assert plan.m_a == 3 + 2 + 2
    assert [s.location for s in plan.delayed.specs] == [2, 2, 3, 3]


def test_duplicates_rejected():
    s = MeasurementSpec("pinj", 3, 0.01)
    with pytest.raises(PlanError, match="duplicate"):
        MeasurementPlan((s, s))
    # same quantity once in real time and once delayed is allowed
    MeasurementPlan((s, MeasurementSpec("pinj", 3, 0.01, Availability.DELAYED)))


def test_sigma_must_be_positive():
    with pytest.raises(PlanError):
        MeasurementSpec("vmag", 1, 0.0)


def test_out_of_range_location():
    with pytest.raises(PlanError, match="out of range"):
        full_index(Kind.PFLOW, 38, 33, 37)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(Kind)), st.integers(1, 20), st.booleans()),
                unique=True, max_size=40))
def test_plan_layout_properties(entries):
    specs = tuple(MeasurementSpec(k, loc, 0.01, Availability.DELAYED if d else Availability.REALTIME)
                  for k, loc, d in entries)
    plan = MeasurementPlan(specs)
    assert plan.m_a + plan.m_d == len(plan) == len(specs)
    assert set(plan.specs) == set(specs)
    assert all(s.availability is Availability.REALTIME for s in plan.specs[:plan.m_a])
    assert all(s.availability is Availability.DELAYED for s in plan.specs[plan.m_a:])
    again = MeasurementPlan.from_csv(plan.to_csv())
    assert again == plan and again.digest() == plan.digest()


def test_plan_csv_format(net33):
    text = default_plan(net33).to_csv()
    lines = text.splitlines()
    assert lines[0] == "kind,location,sigma,availability"
    assert lines[1] == "vmag,1,0.001,realtime"
    assert lines[-1] == "qinj,32,0.01,delayed"


def test_bad_plan_csv():
    with pytest.raises(PlanError):
        MeasurementPlan.from_csv("kind,location,sigma,availability\nvolts,1,0.1,realtime\n")
