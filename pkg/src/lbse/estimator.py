"""Weighted least-squares state estimation from flat start.

One damped Gauss-Newton routine serves both the observable problem and the
underdetermined real-time problem. Steps are computed from the SVD of the
weighted Jacobian, so when the Jacobian has more columns than rows every step
is the minimum-norm solution of the damped linearized system. Started at the
flat profile, the iteration therefore picks one deterministic point of the
solution manifold. Returned states are canonical: non-negative magnitudes and
angles in (-pi, pi].
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .grid import AdmittanceMatrix
from .measurements import MeasurementPlan, StateVector, full_jacobian, full_outputs


class ObservabilityError(RuntimeError):
    """The Jacobian at the initial point is column-rank deficient; use :func:`un` instead."""


@dataclass(frozen=True)
class SolverOptions:
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    # mixed-weight pseudo-measurement problems occasionally crawl along a narrow
    # valley for thousands of steps before meeting the gradient test
    max_iter: int = 10000
    lambda0: float = 1e-3
    # Observable solves scale lambda0 and lambda_max by the largest squared
    # singular value of the first weighted Jacobian. With 1e6 weights an
    # absolute 1e-3 leaves the first steps undamped, and from flat start they
    # jump into spurious minima. un() keeps absolute damping, which preserves its
    # minimum-norm path, and only falls back to relative damping when it stalls.
    relative_damping: bool = True
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e12
    rcond: float = 1e-10


DEFAULT_OPTIONS = SolverOptions()


@dataclass(frozen=True)
class WlsProblem:
    z: np.ndarray
    plan: MeasurementPlan
    weights: np.ndarray | None = None
    init: StateVector | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        object.__setattr__(self, "z", z)
        w = self.plan.weights if self.weights is None else np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if z.shape != (len(self.plan),) or w.shape != z.shape:
            raise ValueError(f"z/weights length must equal plan size {len(self.plan)}")
        if not np.all(w > 0):
            raise ValueError("weights must be strictly positive")


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solve.

    ``converged`` means the gradient test or the step test passed. With very
    small sigmas the weighted gradient has a round-off floor above the
    gradient tolerance, so heavily weighted problems end on the step test.
    """

    x_hat: StateVector
    objective: float
    iterations: int
    converged: bool
    step_norm: float
    grad_norm: float
    trace: list[tuple[int, float, float, float]] = field(default_factory=list, repr=False)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iteration,objective,lambda,step_norm\n")
        for it, obj, lam, step in self.trace:
            buf.write(f"{it},{obj!r},{lam!r},{step!r}\n")
        return buf.getvalue()


def canonical(state: StateVector, slack: int = 0) -> StateVector:
    """Same phasors with ``v >= 0`` and angles in (-pi, pi].

    ``(v, theta)`` and ``(-v, theta + pi)`` describe the same complex voltage,
    and buses without a magnitude measurement cannot tell them apart. Negating
    every phasor at once leaves all powers unchanged, which keeps the slack
    angle at zero when its own magnitude came out negative.
    """
    V = state.v * np.exp(1j * state.theta)
    if state.v[slack] < 0:
        V = -V
    return StateVector(np.abs(V), np.angle(V))


def _solve(z, rows, weights, init, adm, options, observable, relative=None):
    relative = options.relative_damping and observable if relative is None else relative
    slack = adm.slack
    sw = np.sqrt(weights)
    x = init.free(slack)

    def residual(xv):
        st = StateVector.from_free(xv, slack)
        return st, sw * (z - full_outputs(st, adm)[rows])

    state, r = residual(x)
    obj = float(r @ r)
    lam = options.lambda0
    lam_max = options.lambda_max
    trace = []
    step_norm = np.inf
    grad_norm = np.inf
    converged = False
    it = 0
    for it in range(1, options.max_iter + 1):
        A = sw[:, None] * full_jacobian(state, adm)[rows]
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        keep = s > options.rcond * s[0]
        if observable and it == 1 and np.count_nonzero(keep) < A.shape[1]:
            raise ObservabilityError(
                f"measurement Jacobian has rank {np.count_nonzero(keep)} < {A.shape[1]} free "
                "states; the plan is unobservable, solve with un() instead")
        if relative and it == 1:
            lam, lam_max = lam * s[0] ** 2, lam_max * s[0] ** 2
        grad_norm = float(np.max(np.abs(A.T @ r)))
        if grad_norm <= options.grad_tol:
            converged = True
            it -= 1
            break
        Vb, sb = Vt[keep], s[keep]
        proj = U[:, keep].T @ r
        accepted = False
        while True:
            # minimum-norm damped step: lies in the row space of A
            dx = Vb.T @ (sb / (sb ** 2 + lam) * proj)
            step_norm = float(np.max(np.abs(dx)))
            state_new, r_new = residual(x + dx)
            obj_new = float(r_new @ r_new)
            if obj_new <= obj:
                x, state, r, obj = x + dx, state_new, r_new, obj_new
                lam = max(lam / options.lambda_down, options.lambda_min)
                accepted = True
                break
            lam *= options.lambda_up
            if lam > lam_max or step_norm <= options.step_tol:
                break
        trace.append((it, obj, lam, step_norm))
        if step_norm <= options.step_tol:
            converged = True
            break
        if not accepted:
            break
    if not converged and it == options.max_iter:
        A = sw[:, None] * full_jacobian(state, adm)[rows]
        grad_norm = float(np.max(np.abs(A.T @ r)))
        converged = grad_norm <= options.grad_tol
    x_hat = canonical(state, slack)
    return SolveReport(x_hat=x_hat, objective=obj, iterations=it, converged=converged,
                       step_norm=step_norm, grad_norm=grad_norm, trace=trace)


def wls(problem: WlsProblem, adm: AdmittanceMatrix,
        options: SolverOptions = DEFAULT_OPTIONS) -> SolveReport:
    """Observable weighted least-squares estimate from ``problem.init`` (flat by default).

    Raises :class:`ObservabilityError` when the plan cannot determine all
    ``2n-1`` free states.
    """
    init = problem.init or StateVector.flat(adm.n_bus)
    if len(problem.plan) < 2 * adm.n_bus - 1:
        raise ObservabilityError(
            f"{len(problem.plan)} measurements cannot observe {2 * adm.n_bus - 1} states; "
            "solve with un() instead")
    rows = problem.plan.rows(adm.n_bus, adm.n_branch)
    return _solve(problem.z, rows, problem.weights, init, adm, options, observable=True)


def un(z_a: np.ndarray, plan_a: MeasurementPlan, adm: AdmittanceMatrix,
       weights_a: np.ndarray | None = None, init: StateVector | None = None,
       options: SolverOptions = DEFAULT_OPTIONS) -> SolveReport:
    """Solve the underdetermined real-time problem; the optimum has zero residual.

    The returned state reproduces ``z_a`` and is the limit of minimum-norm
    Gauss-Newton steps from ``init``. If the lightly damped path stalls, the
    solve is repeated once with damping scaled to the Jacobian.
    """
    problem = WlsProblem(z_a, plan_a, weights_a, init)
    init = problem.init or StateVector.flat(adm.n_bus)
    rows = plan_a.rows(adm.n_bus, adm.n_branch)
    rep = _solve(problem.z, rows, problem.weights, init, adm, options, observable=False)
    if not rep.converged and options.relative_damping:
        retry = _solve(problem.z, rows, problem.weights, init, adm, options,
                       observable=False, relative=True)
        if retry.converged:
            return retry
    return rep


def pseudo_from_un(x_tilde: StateVector, delayed_plan: MeasurementPlan,
                   adm: AdmittanceMatrix) -> np.ndarray:
    """Delayed-measurement values implied by an unobservable estimate."""
    return full_outputs(x_tilde, adm)[delayed_plan.rows(adm.n_bus, adm.n_branch)]
