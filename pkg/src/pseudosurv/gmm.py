"""Quadratic inference functions: GMM estimation of the cloglog mean model.

The inverse working correlation is expanded over a small set of 0/1 basis
matrices, each contributing P score equations per subject.  With J > 1 the
system is over-identified and the estimate minimizes the quadratic form
U' C^-1 U built from the stacked scores.

With a two-arm design and no further covariates the EXCH stack carries
exact linear redundancies (the all-ones basis collapses per-subject scores
onto two directions), so C_n is rank deficient by construction.  The
quadratic forms are therefore evaluated spectrally: directions carrying no
score mass are projected out, and a score component along a null direction
means the form is genuinely undefined.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .design import DesignMatrix, mean_and_derivative
from .gee import FitResult
from .pseudo import PseudoObsMatrix

MAX_ITER = 100
GRAD_TOL = 1e-6
QIF_TOL = 1e-10
EIG_RELATIVE_CUTOFF = 1e-13
OFF_RANGE_TOL = 1e-8


@dataclass(frozen=True)
class BasisSet:
    """Basis-matrix expansion of an inverse working correlation.

    IND uses the identity alone; EXCH adds the all-off-diagonal-ones
    matrix; AR1 adds the first off-diagonals.
    """

    kind: str
    K: int

    def __post_init__(self):
        if self.kind not in ("IND", "EXCH", "AR1"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be positive")

    @property
    def J(self) -> int:
        return 1 if self.kind == "IND" else 2

    def matrices(self) -> list[np.ndarray]:
        K = self.K
        mats = [np.eye(K)]
        if self.kind == "EXCH":
            mats.append(np.ones((K, K)) - np.eye(K))
        elif self.kind == "AR1":
            off = np.zeros((K, K))
            idx = np.arange(K - 1)
            off[idx, idx + 1] = 1.0
            off[idx + 1, idx] = 1.0
            mats.append(off)
        return mats


@dataclass(frozen=True)
class ScoreState:
    """Stacked per-subject scores with their first two moments."""

    u: np.ndarray       # (n, J*P) per-subject scores
    U: np.ndarray       # (J*P,) mean score
    C: np.ndarray       # (J*P, J*P) = sum u_i u_i' / n^2

    @property
    def n(self) -> int:
        return self.u.shape[0]


class SpectralInverse:
    """Pseudo-inverse of a symmetric PSD matrix with a spectral cutoff.

    The matrix is diagonally equilibrated before the eigendecomposition
    (quadratic forms are invariant to that; conditioning is not).
    Eigenvalues below `rel_cutoff` times the largest are treated as
    structural zeros.  Quadratic forms report None (undefined) when the
    matrix has no positive spectrum or when the vector has appreciable
    mass along a discarded direction.
    """

    def __init__(self, matrix: np.ndarray, rel_cutoff: float = EIG_RELATIVE_CUTOFF):
        sym = 0.5 * (matrix + matrix.T)
        diag = np.diag(sym)
        self.scale = np.sqrt(np.where(diag > 0, diag, 1.0))
        balanced = sym / np.outer(self.scale, self.scale)
        self.eigenvalues, self.eigenvectors = np.linalg.eigh(balanced)
        lam_max = self.eigenvalues[-1]
        self.defined = bool(lam_max > 0 and np.isfinite(lam_max))
        self.keep = self.eigenvalues > lam_max * rel_cutoff if self.defined else None

    @property
    def rank(self) -> int:
        return int(self.keep.sum()) if self.defined else 0

    def quadratic(self, vec: np.ndarray) -> float | None:
        """vec' M^+ vec, or None if undefined or vec leaves the range."""
        if not self.defined:
            return None
        coords = self.eigenvectors.T @ (vec / self.scale)
        total = float(coords @ coords)
        off = float(coords[~self.keep] @ coords[~self.keep])
        if off > OFF_RANGE_TOL * total:
            return None
        kept = coords[self.keep]
        return float(kept @ (kept / self.eigenvalues[self.keep]))

    def apply(self, mat: np.ndarray) -> np.ndarray:
        """M^+ @ mat restricted to the retained spectrum."""
        vector_input = mat.ndim == 1
        cols = (mat[:, np.newaxis] if vector_input else mat) / self.scale[:, np.newaxis]
        coords = self.eigenvectors.T @ cols
        coords[~self.keep] = 0.0
        coords[self.keep] /= self.eigenvalues[self.keep][:, np.newaxis]
        out = (self.eigenvectors @ coords) / self.scale[:, np.newaxis]
        return out[:, 0] if vector_input else out


def score_vector(
    y: PseudoObsMatrix | np.ndarray,
    X: DesignMatrix,
    beta: np.ndarray,
    basis: BasisSet,
) -> ScoreState:
    """Per-subject stacked scores u_i = [D_i' M_j (y_i - mu_i)]_j."""
    values = y.values if isinstance(y, PseudoObsMatrix) else np.asarray(y, dtype=float)
    mu, D = mean_and_derivative(X.blocks, beta)
    resid = values - mu
    pieces = []
    for M in basis.matrices():
        weighted = resid @ M.T
        pieces.append(np.einsum("nkp,nk->np", D, weighted))
    u = np.concatenate(pieces, axis=1)
    n = u.shape[0]
    U = u.mean(axis=0)
    C = u.T @ u / n**2
    return ScoreState(u=u, U=U, C=C)


def qif(
    y: PseudoObsMatrix | np.ndarray,
    X: DesignMatrix,
    beta: np.ndarray,
    basis: BasisSet,
) -> float:
    """Quadratic inference function Q = U' C^-1 U (>= 0, 0 iff U = 0)."""
    state = score_vector(y, X, beta, basis)
    value = SpectralInverse(state.C).quadratic(state.U)
    if value is None:
        raise np.linalg.LinAlgError(
            "C_n not invertible on the score range at this beta "
            f"(condition number {np.linalg.cond(state.C):.3e})"
        )
    return value


def fit_gmm(
    y: PseudoObsMatrix,
    X: DesignMatrix,
    basis: BasisSet | str = "IND",
) -> FitResult:
    """Minimize the quadratic inference function.

    Starting values come from the truncated-cloglog least-squares
    procedure (epsilon = 0.05).  Newton steps solve the QIF estimating
    equation 2 G' C^-1 U = 0 with G treating D_i as locally constant,
    falling back to finite-difference derivatives when that surrogate
    stops contracting; the line search damps on the equation residual
    and treats an undefined C_n along the path as infinitely bad.
    """
    if isinstance(basis, str):
        basis = BasisSet(kind=basis, K=X.K)
    if basis.K != X.K:
        raise ValueError("basis dimension must match the grid")
    from .bayes import starting_values  # deferred: bayes depends on this module

    beta = starting_values(y, X, epsilon=0.05)

    def score_parts(b):
        state = score_vector(y, X, b, basis)
        inverse = SpectralInverse(state.C)
        q = inverse.quadratic(state.U)
        if q is None:
            return None
        G = _score_jacobian(X, b, basis)
        grad = 2.0 * G.T @ inverse.apply(state.U)
        return state, inverse, q, G, grad

    parts = score_parts(beta)
    if parts is None:
        raise np.linalg.LinAlgError("QIF undefined at the starting values")
    state, inverse, q, G, grad = parts

    converged = False
    iterations = 0
    use_fd = False
    for iterations in range(1, MAX_ITER + 1):
        if np.max(np.abs(grad)) < GRAD_TOL:
            converged = True
            break
        if use_fd:
            jac = _fd_gradient_jacobian(score_parts, beta, grad)
        else:
            jac = 2.0 * G.T @ inverse.apply(G)
        try:
            step = -np.linalg.solve(jac, grad)
        except np.linalg.LinAlgError:
            if not use_fd:
                use_fd = True
                continue
            break
        # damp on the estimating-equation residual; C_n varies with beta,
        # so the exact objective is unreliable as a merit function here
        merit = float(grad @ grad)
        t = 1.0
        accepted = False
        for _ in range(40):
            trial = beta + t * step
            trial_parts = score_parts(trial)
            if trial_parts is not None:
                trial_merit = float(trial_parts[4] @ trial_parts[4])
                if trial_merit <= (1.0 - 1e-4 * t) * merit:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            if not use_fd:
                # the cheap Jacobian stopped contracting; retry with exact
                # finite-difference derivatives of the estimating equation
                use_fd = True
                continue
            break
        beta = trial
        state, inverse, q, G, grad = trial_parts

    if not converged:
        converged = bool(np.max(np.abs(grad)) < GRAD_TOL)
    message = "" if converged else "QIF minimization stalled"
    try:
        covariance = _gmm_covariance(X, beta, basis, inverse)
    except np.linalg.LinAlgError:
        covariance = np.full((X.P, X.P), np.nan)
        converged = False
        message = "degenerate score Jacobian at the minimizer"
    if not converged:
        warnings.warn(f"GMM fit flagged: {message}", RuntimeWarning)
    return FitResult(
        beta=beta,
        covariance=covariance,
        iterations=iterations,
        converged=converged,
        correlation=basis.kind,
        names=X.column_names,
        message=message,
    )


def _fd_gradient_jacobian(score_parts, beta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Forward-difference Jacobian of the QIF gradient in beta."""
    P = beta.size
    jac = np.empty((P, P))
    for p in range(P):
        h = 1e-7 * (1.0 + abs(beta[p]))
        bumped = beta.copy()
        bumped[p] += h
        parts = score_parts(bumped)
        if parts is None:
            jac[:, p] = 0.0
            jac[p, p] = 1.0
            continue
        jac[:, p] = (parts[4] - grad) / h
    return jac


def _score_jacobian(X: DesignMatrix, beta: np.ndarray, basis: BasisSet) -> np.ndarray:
    """dU/dbeta = -(1/n) sum_i stack_j(D_i' M_j D_i), D_i held constant."""
    _, D = mean_and_derivative(X.blocks, beta)
    n = X.n
    rows = []
    for M in basis.matrices():
        rows.append(-np.einsum("nkp,kl,nlq->pq", D, M, D) / n)
    return np.concatenate(rows, axis=0)


def _gmm_covariance(X, beta, basis, inverse: SpectralInverse) -> np.ndarray:
    G = _score_jacobian(X, beta, basis)
    return np.linalg.inv(G.T @ inverse.apply(G))
