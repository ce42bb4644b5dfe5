"""The nine estimation approaches as dataset -> test-set state estimates.

Expensive per-instance solves (retrospective labels and the unobservable
estimates that feed the enhanced features) are done once in :func:`prepare`
and shared by every method. Fitting only ever sees the training split via
:class:`TrainingView`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .estimator import DEFAULT_OPTIONS, SolverOptions, WlsProblem, pseudo_from_un, un, wls
from .grid import AdmittanceMatrix
from .learners import ENHANCED, PLAIN, LinearModel, fit_linear, knn_predict, predict
from .measurements import MeasurementPlan, StateVector, full_outputs
from .scenario import Dataset

log = logging.getLogger(__name__)

METHODS = ("BN", "FL", "UN", "SF", "SFstar", "NN1", "NN20", "PM", "PMstar")
LEARNED = {"SF", "SFstar", "NN1", "NN20", "PM", "PMstar"}
DISPLAY = {"SFstar": "SF*", "PMstar": "PM*", "NN1": "1NN", "NN20": "20NN"}


class PipelineError(RuntimeError):
    pass


def _map(func: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) < 2 * workers:
        return [func(it) for it in items]
    chunk = max(1, len(items) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items, chunksize=chunk))


# ---------------------------------------------------------------------------
# per-instance solves

@dataclass(frozen=True)
class _InstanceTask:
    z_a: np.ndarray
    z_d: np.ndarray
    plan: MeasurementPlan
    adm: AdmittanceMatrix
    options: SolverOptions


def _solve_instance(task: _InstanceTask):
    plan, adm = task.plan, task.adm
    full = wls(WlsProblem(np.concatenate([task.z_a, task.z_d]), plan), adm, task.options)
    rep = un(task.z_a, plan.available, adm, options=task.options)
    return (full.x_hat.free(adm.slack), full.converged,
            rep.x_hat.free(adm.slack), rep.converged, rep.objective)


@dataclass
class Prepared:
    """Dataset plus retrospective labels and unobservable estimates for every instance."""

    dataset: Dataset
    adm: AdmittanceMatrix
    retro: np.ndarray        # K x (2n-1) free states, wls(z_a, z_d)
    retro_ok: np.ndarray
    un_state: np.ndarray     # K x (2n-1) free states, un(z_a)
    un_ok: np.ndarray
    un_objective: np.ndarray
    # A converged un solve is usable even when its residual stays above
    # un_tol: a metered flow whose end voltages are both measured is
    # redundant, and noisy readings then cannot all be matched.
    pseudo: np.ndarray       # K x m_d, h^d(un(z_a))
    options: SolverOptions = DEFAULT_OPTIONS
    workers: int = 1
    un_tol: float = 1e-10

    @property
    def un_exact(self) -> np.ndarray:
        """Instances whose unobservable solve reproduced z_a to ``un_tol``."""
        return self.un_ok & (self.un_objective <= self.un_tol)

    @property
    def plan(self) -> MeasurementPlan:
        return self.dataset.plan

    def features(self, mode: str, idx: np.ndarray) -> np.ndarray:
        z_a = self.dataset.z_a[idx]
        if mode == PLAIN:
            return z_a
        if mode == ENHANCED:
            return np.hstack([z_a, self.pseudo[idx]])
        raise ValueError(f"unknown feature mode {mode!r}")

    @property
    def train_ids(self) -> np.ndarray:
        """Training instances whose retrospective and unobservable solves both converged."""
        tr = self.dataset.train
        return tr[self.retro_ok[tr] & self.un_ok[tr]]

    def training_view(self) -> "TrainingView":
        ids = self.train_ids
        return TrainingView(ids=ids, z_a=self.dataset.z_a[ids], z_d=self.dataset.z_d[ids],
                            pseudo=self.pseudo[ids], labels=self.retro[ids])

    @property
    def test_ids(self) -> np.ndarray:
        return self.dataset.test


@dataclass(frozen=True)
class TrainingView:
    """Everything a learner may see: training instances only."""

    ids: np.ndarray
    z_a: np.ndarray
    z_d: np.ndarray
    pseudo: np.ndarray
    labels: np.ndarray

    def features(self, mode: str) -> np.ndarray:
        return self.z_a if mode == PLAIN else np.hstack([self.z_a, self.pseudo])


def prepare(dataset: Dataset, adm: AdmittanceMatrix, options: SolverOptions = DEFAULT_OPTIONS,
            workers: int = 1, un_tol: float = 1e-10) -> Prepared:
    """Run the retrospective and unobservable estimators on every instance."""
    tasks = [_InstanceTask(dataset.z_a[k], dataset.z_d[k], dataset.plan, adm, options)
             for k in range(len(dataset))]
    out = _map(_solve_instance, tasks, workers)
    retro = np.array([o[0] for o in out])
    un_state = np.array([o[2] for o in out])
    pseudo = np.array([pseudo_from_un(StateVector.from_free(x, adm.slack), dataset.plan.delayed, adm)
                       for x in un_state]).reshape(len(dataset), dataset.plan.m_d)
    prep = Prepared(dataset=dataset, adm=adm, retro=retro,
                    retro_ok=np.array([o[1] for o in out]), un_state=un_state,
                    un_ok=np.array([o[3] for o in out]),
                    un_objective=np.array([o[4] for o in out]),
                    pseudo=pseudo, options=options, workers=workers, un_tol=un_tol)
    log.info("prepared %d instances: %d retrospective and %d unobservable solves failed",
             len(dataset), (~prep.retro_ok).sum(), (~prep.un_ok).sum())
    inexact = int((prep.un_ok & ~prep.un_exact).sum())
    if inexact:
        log.warning("%d unobservable solves kept a residual above %g; the real-time "
                    "set is locally redundant", inexact, un_tol)
    return prep


def retrospective_labels(dataset: Dataset, adm: AdmittanceMatrix,
                         options: SolverOptions = DEFAULT_OPTIONS) -> tuple[list[StateVector], np.ndarray]:
    """``wls(z_a, z_d)`` for every instance, with convergence flags."""
    states, flags = [], []
    for k in range(len(dataset)):
        z = np.concatenate([dataset.z_a[k], dataset.z_d[k]])
        rep = wls(WlsProblem(z, dataset.plan), adm, options)
        states.append(rep.x_hat)
        flags.append(rep.converged)
    return states, np.array(flags, dtype=bool)


# ---------------------------------------------------------------------------
# methods

@dataclass
class Method:
    tag: str
    model: LinearModel | None = None
    mode: str | None = None
    k: int | None = None
    train: TrainingView | None = None

    @property
    def name(self) -> str:
        return DISPLAY.get(self.tag, self.tag)


@dataclass
class EstimateSet:
    tag: str
    ids: np.ndarray
    states: np.ndarray            # K x (2n-1) free states
    converged: np.ndarray
    pseudo: np.ndarray | None = None   # K x m_d delayed values the method implies
    _outputs: np.ndarray | None = field(default=None, repr=False)

    def state(self, j: int, slack: int) -> StateVector:
        return StateVector.from_free(self.states[j], slack)

    def outputs(self, adm: AdmittanceMatrix) -> np.ndarray:
        """Full output vectors recomputed from the estimated states (p.u.)."""
        if self._outputs is None:
            self._outputs = np.array([full_outputs(self.state(j, adm.slack), adm)
                                      for j in range(len(self.ids))])
        return self._outputs


def fit_method(tag: str, prep: Prepared) -> Method:
    if tag not in METHODS:
        raise PipelineError(f"unknown method {tag!r}; choose from {', '.join(METHODS)}")
    if tag not in LEARNED:
        return Method(tag)
    view = prep.training_view()
    if len(view.ids) == 0:
        raise PipelineError("no usable training instances")
    if tag in ("NN1", "NN20"):
        return Method(tag, k=1 if tag == "NN1" else 20, train=view)
    mode = ENHANCED if tag.endswith("star") else PLAIN
    X = view.features(mode)
    feats = [f"za_{s.label}" for s in prep.plan.available.specs]
    if mode == ENHANCED:
        feats += [f"un_{s.label}" for s in prep.plan.delayed.specs]
    if tag.startswith("SF"):
        n = prep.adm.n_bus
        outs = [f"v_{k}" for k in range(1, n + 1)] + \
            [f"th_{k}" for k in range(1, n + 1) if k != prep.adm.slack + 1]
        model = fit_linear(X, view.labels, feats, outs)
    else:
        model = fit_linear(X, view.z_d, feats, [f"zd_{s.label}" for s in prep.plan.delayed.specs])
    return Method(tag, model=model, mode=mode)


@dataclass(frozen=True)
class _PseudoTask:
    z: np.ndarray
    weights: np.ndarray
    plan: MeasurementPlan
    adm: AdmittanceMatrix
    options: SolverOptions


def _solve_pseudo(task: _PseudoTask):
    rep = wls(WlsProblem(task.z, task.plan, task.weights), task.adm, task.options)
    return rep.x_hat.free(task.adm.slack), rep.converged


def _implied_delayed(states: np.ndarray, plan: MeasurementPlan, adm: AdmittanceMatrix) -> np.ndarray:
    return np.array([pseudo_from_un(StateVector.from_free(x, adm.slack), plan.delayed, adm)
                     for x in states]).reshape(len(states), plan.m_d)


def run_method(method: Method | str, prep: Prepared) -> EstimateSet:
    """Estimate the state of every test instance with ``method``."""
    if isinstance(method, str):
        method = fit_method(method, prep)
    ids = prep.test_ids
    adm, plan = prep.adm, prep.plan
    tag = method.tag
    K = len(ids)
    ok = np.ones(K, dtype=bool)
    pseudo = None
    if tag == "BN":
        states, ok = prep.retro[ids], prep.retro_ok[ids]
    elif tag == "FL":
        states = np.tile(StateVector.flat(adm.n_bus).free(adm.slack), (K, 1))
    elif tag == "UN":
        states, ok, pseudo = prep.un_state[ids], prep.un_ok[ids], prep.pseudo[ids]
    elif tag in ("SF", "SFstar"):
        states = predict(method.model, prep.features(method.mode, ids))
        ok = prep.un_ok[ids] if method.mode == ENHANCED else ok
    elif tag in ("NN1", "NN20"):
        states = knn_predict(method.train.z_a, method.train.labels, prep.dataset.z_a[ids], method.k)
    elif tag in ("PM", "PMstar"):
        pseudo = predict(method.model, prep.features(method.mode, ids))
        weights = np.concatenate([plan.available.weights, method.model.residual_sigma ** -2])
        tasks = [_PseudoTask(np.concatenate([prep.dataset.z_a[i], pseudo[j]]), weights, plan, adm,
                             prep.options) for j, i in enumerate(ids)]
        out = _map(_solve_pseudo, tasks, prep.workers)
        states = np.array([o[0] for o in out]).reshape(K, -1)
        ok = np.array([o[1] for o in out], dtype=bool)
        if method.mode == ENHANCED:
            ok &= prep.un_ok[ids]
    else:
        raise PipelineError(f"unknown method {tag!r}")
    if pseudo is None:
        pseudo = _implied_delayed(states, plan, adm)
    return EstimateSet(tag=tag, ids=ids, states=np.asarray(states, dtype=float),
                       converged=np.asarray(ok, dtype=bool), pseudo=pseudo)


def run_methods(tags: Iterable[str], prep: Prepared) -> tuple[dict[str, Method], dict[str, EstimateSet]]:
    methods, estimates = {}, {}
    for tag in tags:
        methods[tag] = fit_method(tag, prep)
        estimates[tag] = run_method(methods[tag], prep)
        log.info("%s: %d/%d test solves converged", tag, estimates[tag].converged.sum(),
                 len(estimates[tag].ids))
    return methods, estimates


def derived_outputs(x_hat: StateVector, adm: AdmittanceMatrix, base_mva: float = 1.0) -> dict[str, np.ndarray]:
    """Injections per bus and from-end flows per branch implied by ``x_hat``.

    Values are scaled by ``base_mva`` (pass the network base to get MW/MVAr).
    """
    y = full_outputs(x_hat, adm)
    n, nb = adm.n_bus, adm.n_branch
    P, Q = y[2 * n:3 * n], y[3 * n:4 * n]
    Pf, Qf = y[4 * n:4 * n + nb], y[4 * n + nb:]
    return {"P": P * base_mva, "Q": Q * base_mva, "Pf": Pf * base_mva, "Qf": Qf * base_mva,
            "Sf": np.hypot(Pf, Qf) * base_mva}
