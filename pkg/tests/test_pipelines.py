import dataclasses
import warnings

import numpy as np
import pytest

from lbse.learners import LinearModel, predict
from lbse.measurements import StateVector, default_plan
from lbse.pipelines import (METHODS, PipelineError, derived_outputs, fit_method, prepare,
                            retrospective_labels, run_method)
from lbse.scenario import build_dataset, get_scenario

from conftest import random_state
from test_measurements import oracle_outputs


@pytest.fixture(scope="module")
def small(net33, adm33):
    plan = default_plan(net33)
    ds = build_dataset(400, 0.8, get_scenario("medium"), plan, adm33, seed=11)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prep = prepare(ds, adm33)
    return ds, prep


@pytest.fixture(scope="module")
def fitted(small):
    _, prep = small
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {t: fit_method(t, prep) for t in METHODS}


def noise_free(ds, adm):
    rows = ds.plan.rows(adm.n_bus, adm.n_branch)
    y = ds.y_true[:, rows]
    return dataclasses.replace(ds, z_a=y[:, :ds.plan.m_a], z_d=y[:, ds.plan.m_a:])


def test_retrospective_noise_free(net33, adm33):
    ds = build_dataset(6, 0.5, get_scenario("medium"), default_plan(net33), adm33, seed=2)
    states, ok = retrospective_labels(noise_free(ds, adm33), adm33)
    assert ok.all()
    for k, st in enumerate(states):
        assert np.max(np.abs(st.v - ds.v[k])) <= 1e-6
        assert np.max(np.abs(st.theta - ds.theta[k])) <= 1e-6


def test_retrospective_deterministic(net33, adm33):
    ds = build_dataset(2, 0.5, get_scenario("medium"), default_plan(net33), adm33, seed=4)
    a, _ = retrospective_labels(ds, adm33)
    b, _ = retrospective_labels(ds, adm33)
    assert np.array_equal(a[0].v, b[0].v) and np.array_equal(a[0].theta, b[0].theta)


def test_prepare_flags(small):
    _, prep = small
    assert prep.retro_ok.all() and prep.un_ok.all()
    assert np.all(prep.un_objective <= 1e-10)
    assert prep.pseudo.shape == (400, 36)


def test_flat_and_bn(small, fitted, adm33):
    ds, prep = small
    fl = run_method(fitted["FL"], prep)
    assert np.all(fl.states[:, :33] == 1.0) and np.all(fl.states[:, 33:] == 0.0)
    bn = run_method(fitted["BN"], prep)
    assert np.array_equal(bn.states, prep.retro[ds.test])
    assert np.array_equal(bn.ids, ds.test)


def test_un_passes_pseudo(small, fitted):
    ds, prep = small
    es = run_method(fitted["UN"], prep)
    assert np.array_equal(es.pseudo, prep.pseudo[ds.test])


def test_sf_star_nests_sf(small, fitted):
    ds, prep = small
    sf = fitted["SF"].model
    m_d = prep.plan.m_d
    padded = LinearModel(np.hstack([sf.weights, np.zeros((sf.weights.shape[0], m_d))]),
                         sf.intercept, sf.residual_sigma)
    feats = prep.features("enhanced", ds.test)
    assert np.allclose(predict(padded, feats), run_method(fitted["SF"], prep).states, atol=1e-12)


def test_nested_training_fit(fitted):
    assert np.all(fitted["SFstar"].model.train_mse <= fitted["SF"].model.train_mse)
    assert np.all(fitted["PMstar"].model.train_mse <= fitted["PM"].model.train_mse)
    for t in ("PM", "PMstar"):
        assert np.abs(fitted[t].model.train_residual_mean).max() <= 1e-9


def test_fitting_never_sees_test_data(small, adm33):
    ds, prep = small
    rng = np.random.default_rng(0)
    spoiled = dataclasses.replace(
        ds, z_d=ds.z_d.copy(), v=ds.v.copy(), theta=ds.theta.copy(), y_true=ds.y_true.copy())
    for arr in (spoiled.z_d, spoiled.v, spoiled.theta, spoiled.y_true):
        arr[ds.test] = rng.normal(size=arr[ds.test].shape)
    prep2 = dataclasses.replace(prep, dataset=spoiled, retro=prep.retro.copy())
    prep2.retro[ds.test] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for tag in ("SF", "SFstar", "PM", "PMstar"):
            a, b = fit_method(tag, prep).model, fit_method(tag, prep2).model
            assert np.array_equal(a.weights, b.weights) and np.array_equal(a.intercept, b.intercept)
        nn = fit_method("NN20", prep2)
        assert set(nn.train.ids).isdisjoint(ds.test)


def test_pm_solves_full_problem(small, fitted):
    ds, prep = small
    es = run_method(fitted["PMstar"], prep)
    # real-time rows plus one pseudo-measurement per delayed row: observable size
    assert ds.z_a.shape[1] + es.pseudo.shape[1] == len(prep.plan) == 79
    assert es.pseudo.shape[0] == len(ds.test)
    assert es.converged.mean() > 0.95
    assert es.states.shape == (len(ds.test), 65)


def test_knn_methods(small, fitted):
    ds, prep = small
    one = run_method(fitted["NN1"], prep)
    # every 1-NN estimate is one of the training labels
    labels = {tuple(r) for r in prep.retro[prep.train_ids]}
    assert all(tuple(r) in labels for r in one.states)


def test_unknown_method(small):
    with pytest.raises(PipelineError, match="unknown method"):
        fit_method("XX", small[1])


def test_derived_outputs(net33, adm33, toy3):
    flat = derived_outputs(StateVector.flat(33), adm33)
    for key in ("P", "Q", "Pf"):
        assert np.abs(flat[key]).max() < 1e-10
    x = random_state(np.random.default_rng(1), 33)
    out = derived_outputs(x, adm33, base_mva=10.0)
    ref = oracle_outputs(net33, x)
    n, nb = 33, adm33.n_branch
    assert np.allclose(out["P"], 10 * ref[2 * n:3 * n], atol=1e-10)
    assert np.allclose(out["Qf"], 10 * ref[4 * n + nb:], atol=1e-10)
    assert np.allclose(out["Sf"], 10 * np.hypot(ref[4 * n:4 * n + nb], ref[4 * n + nb:]), atol=1e-10)
    net3, adm3 = toy3
    x3 = random_state(np.random.default_rng(2), 3)
    ref3 = oracle_outputs(net3, x3)
    assert np.abs(derived_outputs(x3, adm3)["Pf"] - ref3[12:15]).max() <= 1e-12


def test_redundant_realtime_set_keeps_un_solves(net33, adm33):
    # 15 PMUs put phasors on both ends of the substation branch, so its
    # metered flow is redundant and noisy readings leave a residual
    plan = default_plan(net33, n_pmu=15, n_scada=5)
    ds = build_dataset(12, 0.5, get_scenario("medium"), plan, adm33, seed=4)
    prep = prepare(ds, adm33)
    assert prep.un_ok.all()
    assert not prep.un_exact.any()
    assert np.all(prep.un_objective > prep.un_tol)
    assert len(prep.training_view().ids) == 6
