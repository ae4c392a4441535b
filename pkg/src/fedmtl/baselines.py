"""Compared methods: fixed-quality synchronous solves, mini-batch primal and
dual updates, and fully local / fully global single-model trainers.

Every runner consumes the same dataset type and emits the same round-trace
records as the federated solver, so time-to-quality comparisons line up
column for column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FederatedDataset, TaskDataset, prediction_error, train_test_split
from .losses import DualInfeasibleError, LossKind, _hinge_delta, _squared_delta, subgradient
from .regularizers import (
    MeanRegularized,
    OmegaModel,
    RelationshipState,
    build_relationship,
    primal_from_dual,
    regularizer_conjugate,
    regularizer_grad,
)
from .solver import (
    SOLVER_STREAM,
    ConstantPolicy,
    ConvergenceError,
    DualState,
    PrimalState,
    RoundStats,
    SolverConfig,
    _kappa_vector,
    _run_updates,
    _view_value,
    dual_objective,
    duality_gap,
    init_dual_state,
    make_views,
    measure_theta,
    oracle_subproblem_opt,
    primal_objective,
    run_w_update,
)

SGD_STREAM = 12

DEFAULT_LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0)


@dataclass(frozen=True)
class BaselineRun:
    """Round trace plus the weights the method ended on."""

    trace: list[RoundStats]
    primal: PrimalState


def cocoa_run(ds: FederatedDataset, kind: LossKind, rel: RelationshipState,
              model: OmegaModel, theta_target: float, rounds: int, *,
              seed: int = 0, gap_tol: float | None = None,
              max_passes: int = 500, oracle_tol: float = 1e-9) -> BaselineRun:
    """Synchronous solver with one fixed solution quality across all nodes and
    rounds: every node grinds until its measured quality reaches the target,
    however long that takes, so per-round work follows the hardest subproblem.

    Quality is measured against the exact subproblem optimum (affordable at
    desk scale), removing estimator noise from method comparisons.
    """
    if not 0.0 <= theta_target < 1.0:
        raise ValueError("theta must be in [0, 1)")
    state = init_dual_state(ds)
    kappa = _kappa_vector(rel, "global")
    trace: list[RoundStats] = []
    for h in range(rounds):
        W = primal_from_dual(state.v, rel.mbar)
        views = make_views(ds, kind, state, W, kappa)
        dual_before = dual_objective(state, ds, kind, rel)
        rstar_before = regularizer_conjugate(state.v, rel.mbar)
        deltas = []
        counts = []
        thetas = []
        for t, view in enumerate(views):
            n_t = view.labels.size
            oracle = oracle_subproblem_opt(view, tol=oracle_tol)
            g_zero = _view_value(view, np.zeros(n_t))
            g_star = _view_value(view, oracle)
            denom = g_zero - g_star
            delta = np.zeros(n_t)
            u = np.zeros(ds.d)
            count = 0
            theta = 0.0
            if denom > 1e-14:
                rng = np.random.default_rng([seed, SOLVER_STREAM, t, h])
                theta = 1.0
                for _ in range(max_passes):
                    idx = rng.integers(0, n_t, size=n_t)
                    _run_updates(view, idx, delta, u)
                    count += n_t
                    theta = (_view_value(view, delta, u) - g_star) / denom
                    if theta <= theta_target:
                        break
            deltas.append(delta)
            counts.append(count)
            thetas.append(float(min(1.0, max(0.0, theta))))
        subproblem_sum = sum(
            _view_value(views[t], deltas[t]) for t in range(ds.m)
        )
        for t in range(ds.m):
            state.alpha[t] += deltas[t]
            state.v[:, t] += ds.tasks[t].features @ deltas[t]
        dual = dual_objective(state, ds, kind, rel)
        primal = primal_objective(
            primal_from_dual(state.v, rel.mbar), ds, kind, rel.omega, model
        )
        trace.append(RoundStats(
            h=h, dual=dual, primal=primal, gap=dual + primal,
            dropped=[], update_counts=counts, theta=thetas,
            dual_before=dual_before, subproblem_sum=subproblem_sum,
            rstar_before=rstar_before,
        ))
        if gap_tol is not None and trace[-1].gap <= gap_tol:
            break
    return BaselineRun(trace, PrimalState(primal_from_dual(state.v, rel.mbar)))


def mb_sdca_run(ds: FederatedDataset, kind: LossKind, rel: RelationshipState,
                model: OmegaModel, batch: int, beta: float, rounds: int, *,
                seed: int = 0, policy=None,
                gap_tol: float | None = None) -> BaselineRun:
    """Mini-batch dual coordinate ascent: each node computes ``batch``
    independent coordinate deltas against the frozen snapshot and applies
    them scaled by beta / batch.

    With beta = 1 the scaled sum is a convex combination, so hinge feasibility
    is preserved; beta near batch can overshoot when sampled coordinates
    collide, in which case dual values are reported as None for hinge.
    """
    if batch < 1 or not 1.0 <= beta <= batch:
        raise ValueError("need batch >= 1 and 1 <= beta <= batch")
    state = init_dual_state(ds)
    kappa = _kappa_vector(rel, "global")
    trace: list[RoundStats] = []
    for h in range(rounds):
        W = primal_from_dual(state.v, rel.mbar)
        views = make_views(ds, kind, state, W, kappa)
        counts = []
        for t, view in enumerate(views):
            n_t = view.labels.size
            b_t = int(policy.budget(t, h)) if policy is not None else batch
            if policy is not None and policy.dropped(t, h):
                b_t = 0
            counts.append(b_t)
            if b_t == 0:
                continue
            rng = np.random.default_rng([seed, SOLVER_STREAM, t, h])
            idx = rng.integers(0, n_t, size=b_t)
            scale = beta / b_t
            delta = np.zeros(n_t)
            hinge = kind is LossKind.HINGE
            for i in idx:
                x = view.X[:, i]
                s = float(view.w @ x)
                if hinge:
                    step = _hinge_delta(view.alpha[i], view.labels[i], s,
                                        view.col_norms2[i], view.kappa)
                else:
                    step = _squared_delta(view.alpha[i], view.labels[i], s,
                                          view.col_norms2[i], view.kappa)
                delta[i] += scale * step
            state.alpha[t] += delta
            state.v[:, t] += view.X @ delta
        try:
            dual = dual_objective(state, ds, kind, rel)
        except DualInfeasibleError:
            dual = None
        primal = primal_objective(
            primal_from_dual(state.v, rel.mbar), ds, kind, rel.omega, model
        )
        gap = None if dual is None else dual + primal
        trace.append(RoundStats(
            h=h, dual=dual, primal=primal, gap=gap,
            dropped=[], update_counts=counts,
        ))
        if gap_tol is not None and gap is not None and gap <= gap_tol:
            break
    return BaselineRun(trace, PrimalState(primal_from_dual(state.v, rel.mbar)))


def mb_sgd_run(ds: FederatedDataset, kind: LossKind, model: OmegaModel,
               omega: np.ndarray, batch: int, step: float, rounds: int, *,
               seed: int = 0, schedule: str = "constant",
               policy=None) -> BaselineRun:
    """Mini-batch subgradient descent on the primal: every node estimates the
    subgradient of its local loss term from ``batch`` points (without
    replacement), adds its column of the coupling gradient, and the update is
    applied synchronously."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if schedule not in ("constant", "inv_sqrt"):
        raise ValueError("schedule must be 'constant' or 'inv_sqrt'")
    W = np.zeros((ds.d, ds.m))
    trace: list[RoundStats] = []
    for h in range(rounds):
        eta = step if schedule == "constant" else step / math.sqrt(h + 1.0)
        grad = regularizer_grad(W, omega, model)
        counts = []
        dropped = []
        for t, task in enumerate(ds.tasks):
            b_t = int(policy.budget(t, h)) if policy is not None else batch
            if policy is not None and policy.dropped(t, h):
                dropped.append(t)
                grad[:, t] = 0.0
                counts.append(0)
                continue
            b_t = min(max(b_t, 1), task.n)
            counts.append(b_t)
            rng = np.random.default_rng([seed, SGD_STREAM, t, h])
            idx = rng.choice(task.n, size=b_t, replace=False)
            Xb = task.features[:, idx]
            g = subgradient(kind, W[:, t] @ Xb, task.labels[idx])
            grad[:, t] += (task.n / b_t) * (Xb @ g)
        W -= eta * grad
        trace.append(RoundStats(
            h=h, dual=None, gap=None,
            primal=primal_objective(W, ds, kind, omega, model),
            dropped=dropped, update_counts=counts,
        ))
    return BaselineRun(trace, PrimalState(W.copy()))


# ---------------------------------------------------------------------------
# Local and global reference models


def _solve_single_task(X: np.ndarray, y: np.ndarray, lam: float,
                       kind: LossKind, gap_tol: float,
                       max_epochs: int, seed: int) -> np.ndarray:
    task = TaskDataset(task_id=0, features=X, labels=y)
    ds = FederatedDataset((task,))
    model = MeanRegularized(lambda1=0.0, lambda2=lam)
    rel = build_relationship(model, np.zeros((1, 1)))
    state = init_dual_state(ds)
    run_w_update(
        ds, kind, rel, model, state, ConstantPolicy(task.n),
        rounds=max_epochs, gap_tol=gap_tol, seed=seed,
    )
    gap = duality_gap(state, ds, kind, rel, model)
    if gap > gap_tol:
        raise ConvergenceError(
            f"single-task solve stalled at gap {gap:.3e} (target {gap_tol:.1e}, "
            f"lambda {lam:g}); raise max_epochs"
        )
    return primal_from_dual(state.v, rel.mbar)[:, 0]


def train_local(ds: FederatedDataset, lam: float, kind: LossKind = LossKind.HINGE,
                *, gap_tol: float = 1e-6, max_epochs: int = 20000,
                seed: int = 0) -> PrimalState:
    """One independent L2-regularized model per task, each solved to gap_tol."""
    W = np.empty((ds.d, ds.m))
    for t, task in enumerate(ds.tasks):
        W[:, t] = _solve_single_task(
            task.features, task.labels, lam, kind, gap_tol, max_epochs, seed
        )
    return PrimalState(W)


def train_global(ds: FederatedDataset, lam: float, kind: LossKind = LossKind.HINGE,
                 *, gap_tol: float = 1e-6, max_epochs: int = 20000,
                 seed: int = 0) -> PrimalState:
    """Pool all tasks into one problem, solve a single model, broadcast it."""
    X = np.concatenate([t.features for t in ds.tasks], axis=1)
    y = np.concatenate([t.labels for t in ds.tasks])
    w = _solve_single_task(X, y, lam, kind, gap_tol, max_epochs, seed)
    return PrimalState(np.tile(w[:, None], (1, ds.m)))


def local_trainer(kind: LossKind = LossKind.HINGE, gap_tol: float = 1e-6,
                  max_epochs: int = 20000):
    return lambda ds, lam: train_local(ds, lam, kind, gap_tol=gap_tol,
                                       max_epochs=max_epochs)


def global_trainer(kind: LossKind = LossKind.HINGE, gap_tol: float = 1e-6,
                   max_epochs: int = 20000):
    return lambda ds, lam: train_global(ds, lam, kind, gap_tol=gap_tol,
                                        max_epochs=max_epochs)


def mocha_trainer(model_factory, *, kind: LossKind = LossKind.HINGE,
                  inner_rounds: int = 40, outer_rounds: int = 3,
                  gap_tol: float | None = 1e-4, budget_epochs: int = 1,
                  seed: int = 0):
    """Trainer closure for model selection: lam -> coupling model via
    ``model_factory``, budgets of ``budget_epochs`` local passes per round."""
    from .solver import run_mocha

    def train(ds: FederatedDataset, lam: float) -> PrimalState:
        model = model_factory(lam)
        policy = ConstantPolicy([task.n * budget_epochs for task in ds.tasks])
        config = SolverConfig(
            inner_rounds=inner_rounds, outer_rounds=outer_rounds,
            gap_tol=gap_tol, seed=seed,
        )
        return run_mocha(ds, model, config, policy, kind).primal

    return train


# ---------------------------------------------------------------------------
# Model selection and comparison


def model_select(ds: FederatedDataset, trainer, lambda_grid, k_folds: int,
                 seed: int = 0) -> tuple[float, float]:
    """k-fold cross-validation over the grid; folds are split per task and the
    CV score is the unweighted mean task error.  Ties go to the larger lambda."""
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    grid = sorted(float(l) for l in lambda_grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    assignments = []
    for task in ds.tasks:
        rng = np.random.default_rng([seed, 0xF01D, task.task_id])
        perm = rng.permutation(task.n)
        fold_of = np.empty(task.n, dtype=int)
        fold_of[perm] = np.arange(task.n) % k_folds
        assignments.append(fold_of)

    def _fold_split(fold: int):
        train_tasks = []
        heldout = []
        for t, task in enumerate(ds.tasks):
            mask = assignments[t] == fold
            train_idx = np.flatnonzero(~mask)
            test_idx = np.flatnonzero(mask)
            train_tasks.append(TaskDataset(
                t, task.features[:, train_idx], task.labels[train_idx]
            ))
            heldout.append((task.features[:, test_idx], task.labels[test_idx]))
        return FederatedDataset(tuple(train_tasks)), heldout

    splits = [_fold_split(f) for f in range(k_folds)]
    best_lam, best_err = grid[0], math.inf
    for lam in grid:
        fold_errs = []
        for train_ds, heldout in splits:
            W = np.asarray(getattr(trainer(train_ds, lam), "W"))
            task_errs = []
            for t, (Xh, yh) in enumerate(heldout):
                if yh.size == 0:
                    continue
                pred = np.where(W[:, t] @ Xh > 0.0, 1.0, -1.0)
                task_errs.append(float(np.mean(pred != yh)))
            fold_errs.append(float(np.mean(task_errs)))
        err = float(np.mean(fold_errs))
        if err <= best_err:
            best_lam, best_err = lam, err
    return best_lam, best_err


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    mean_error: float
    std_error: float
    errors: tuple[float, ...]
    lambdas: tuple[float, ...]


def compare_models(ds: FederatedDataset, trainers: dict, lambda_grid,
                   *, shuffles: int = 10, seed: int = 0, k_folds: int = 5,
                   train_fraction: float = 0.75) -> list[ComparisonRow]:
    """Repeated shuffle evaluation: split, cross-validate lambda per method,
    refit on the training split, report mean test error with its standard
    error over shuffles."""
    errors = {name: [] for name in trainers}
    lambdas = {name: [] for name in trainers}
    for r in range(shuffles):
        train_ds, test_ds = train_test_split(ds, train_fraction, seed=seed * 1009 + r)
        for name, trainer in trainers.items():
            lam, _ = model_select(train_ds, trainer, lambda_grid, k_folds,
                                  seed=seed * 1013 + r)
            W = trainer(train_ds, lam)
            _, err = prediction_error(W, test_ds)
            errors[name].append(err)
            lambdas[name].append(lam)
    rows = []
    for name in trainers:
        errs = np.array(errors[name])
        stderr = float(errs.std(ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0
        rows.append(ComparisonRow(
            method=name, mean_error=float(errs.mean()), std_error=stderr,
            errors=tuple(errors[name]), lambdas=tuple(lambdas[name]),
        ))
    return rows
