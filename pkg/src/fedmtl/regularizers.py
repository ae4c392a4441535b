"""Task-coupling regularizers and the matrices that drive the dual solver.

The coupling models act on the per-task weight matrix W (d x m).  Writing w
for the stacked columns of W, every supported model can be rewritten as the
quadratic form

    R(w) = w^T (Mbar^{-1} kron I_d) w

for a symmetric positive definite m x m matrix Mbar.  The conjugate is then
R*(v) = v^T (Mbar kron I_d) v / 4 and the dual-to-primal map is w = Mbar v / 2
blockwise; the 1/2 is forced by the quadratic-form convention and is pinned by
the Fenchel-Young tests.

Stacked md-vectors are represented throughout as d x m arrays whose column t
is the block belonging to task t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MeanRegularized:
    """Fixed coupling: lambda1 * tr(W Omega W^T) + lambda2 * ||W||_F^2."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0.0 or self.lambda2 <= 0.0:
            raise ValueError("need lambda1 >= 0 and lambda2 > 0")


@dataclass(frozen=True)
class ProbabilisticPrior:
    """Learned coupling: lam * (||W||^2 / sigma2_prior + tr(W Omega^{-1} W^T)),
    with Omega constrained to the trace-one PSD set and re-estimated centrally.

    Omega from the trace-normalized square root can be singular, so a ridge
    ``Omega + ridge_eps * I`` is applied before every inversion.
    """

    lam: float
    sigma2_prior: float = 1.0
    ridge_eps: float = 1e-6

    def __post_init__(self):
        if self.lam <= 0.0 or self.sigma2_prior <= 0.0 or self.ridge_eps <= 0.0:
            raise ValueError("need lam, sigma2_prior, ridge_eps > 0")


OmegaModel = MeanRegularized | ProbabilisticPrior


def mean_reg_omega(m: int) -> np.ndarray:
    """Squared centering projection (I - 11^T/m)^2; couples every task to the mean."""
    if m < 1:
        raise ValueError("m must be >= 1")
    c = np.eye(m) - np.full((m, m), 1.0 / m)
    omega = c @ c
    return 0.5 * (omega + omega.T)


def initial_omega(model: OmegaModel, m: int) -> np.ndarray:
    if isinstance(model, MeanRegularized):
        return mean_reg_omega(m)
    return np.eye(m) / m


def _min_eig(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(mat)[0])


def build_mbar(model: OmegaModel, omega: np.ndarray) -> np.ndarray:
    """Symmetric positive definite Mbar induced by the model for a given Omega."""
    m = omega.shape[0]
    if isinstance(model, MeanRegularized):
        to_invert = model.lambda1 * omega + model.lambda2 * np.eye(m)
    else:
        ridged = omega + model.ridge_eps * np.eye(m)
        low = _min_eig(ridged)
        if low <= 0.0:
            raise np.linalg.LinAlgError(
                f"omega + ridge not positive definite (min eigenvalue {low:.3e})"
            )
        to_invert = model.lam * (np.eye(m) / model.sigma2_prior + np.linalg.inv(ridged))
    low = _min_eig(to_invert)
    if low <= 0.0:
        raise np.linalg.LinAlgError(
            f"coupling matrix not positive definite (min eigenvalue {low:.3e})"
        )
    mbar = np.linalg.inv(to_invert)
    return 0.5 * (mbar + mbar.T)


def sigma_prime(mbar: np.ndarray, gamma: float = 1.0) -> float:
    """Safe subproblem coefficient: gamma * max_t sum_t' |Mbar_tt'| / Mbar_tt."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    diag = np.diag(mbar)
    return float(gamma * np.max(np.abs(mbar).sum(axis=1) / diag))


def sigma_prime_per_task(mbar: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Per-task variant; looser tasks get a smaller coefficient. Max equals sigma_prime."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    diag = np.diag(mbar)
    return gamma * np.abs(mbar).sum(axis=1) / diag


def regularizer_conjugate(v: np.ndarray, mbar: np.ndarray) -> float:
    """R*(v) = sum_{t,t'} Mbar_tt' <v_t, v_t'> / 4 for blocks v_t = v[:, t]."""
    return float(0.25 * np.sum(mbar * (v.T @ v)))


def primal_from_dual(v: np.ndarray, mbar: np.ndarray) -> np.ndarray:
    """Gradient of the conjugate: column t is sum_t' Mbar_tt' v_t' / 2."""
    return 0.5 * (v @ mbar)


def regularizer_value(W: np.ndarray, omega: np.ndarray, model: OmegaModel) -> float:
    """Penalty value for weights W under the model; equals the Mbar^{-1} quadratic form."""
    if isinstance(model, MeanRegularized):
        return float(
            model.lambda1 * np.sum((W @ omega) * W) + model.lambda2 * np.sum(W * W)
        )
    ridged = omega + model.ridge_eps * np.eye(omega.shape[0])
    cross = np.linalg.solve(ridged, W.T).T
    return float(model.lam * (np.sum(W * W) / model.sigma2_prior + np.sum(cross * W)))


def regularizer_grad(W: np.ndarray, omega: np.ndarray, model: OmegaModel) -> np.ndarray:
    """Gradient of regularizer_value with respect to W."""
    if isinstance(model, MeanRegularized):
        return 2.0 * model.lambda1 * (W @ omega) + 2.0 * model.lambda2 * W
    ridged = omega + model.ridge_eps * np.eye(omega.shape[0])
    cross = np.linalg.solve(ridged, W.T).T
    return 2.0 * model.lam * (W / model.sigma2_prior + cross)


def update_omega(model: OmegaModel, W: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Central coupling update given the current weights.

    Fixed-coupling models return omega unchanged.  The probabilistic model
    returns the trace-normalized symmetric square root of W^T W, computed by
    eigendecomposition with negative roundoff eigenvalues floored at zero; a
    degenerate W falls back to I/m.
    """
    if isinstance(model, MeanRegularized):
        return omega
    if not np.all(np.isfinite(W)):
        raise ValueError("weights must be finite for the coupling update")
    m = W.shape[1]
    gram = W.T @ W
    evals, evecs = np.linalg.eigh(0.5 * (gram + gram.T))
    root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    tr = float(np.trace(root))
    if tr < model.ridge_eps:
        return np.eye(m) / m
    out = root / tr
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class RelationshipState:
    """Coupling snapshot the solver runs against: Omega, Mbar, and safe sigma'.

    Immutable between central coupling updates; rebuilt (and every derived
    coefficient with it) whenever Omega changes.
    """

    omega: np.ndarray
    mbar: np.ndarray
    sigma_prime: float
    sigma_prime_per_task: np.ndarray
    gamma: float


def build_relationship(model: OmegaModel, omega: np.ndarray,
                       gamma: float = 1.0) -> RelationshipState:
    if isinstance(model, ProbabilisticPrior):
        tr = float(np.trace(omega))
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"probabilistic coupling needs trace(omega)=1, got {tr!r}")
    mbar = build_mbar(model, omega)
    return RelationshipState(
        omega=omega,
        mbar=mbar,
        sigma_prime=sigma_prime(mbar, gamma),
        sigma_prime_per_task=sigma_prime_per_task(mbar, gamma),
        gamma=gamma,
    )


def write_matrix_csv(path, mat: np.ndarray) -> None:
    """Row-major CSV dump with a leading ``m,<rows>`` header line."""
    mat = np.asarray(mat, dtype=float)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"m,{mat.shape[0]}\n")
        for row in mat:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 2 or header[0] != "m":
            raise ValueError(f"{path}: malformed matrix header {header!r}")
        rows = [
            [float(x) for x in line.strip().split(",")]
            for line in fh
            if line.strip()
        ]
    return np.array(rows, dtype=float)
