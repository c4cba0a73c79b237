"""Penalized least-squares solvers shared by every estimation step.

All fits minimise

    (1 / 2N) * sum_k ||r_k - Z_k (offset + delta)||^2 + lam * ||delta||_1

over delta, where the (Z_k, r_k) blocks are stacked datasets with a
common column count and N is the total row count.  Coordinate descent
runs on the pooled Gram matrix, so block structure costs nothing beyond
one pass to accumulate Z.T @ Z per block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from transfarm.numerics import ConvergenceError, RngStream, check_matrix, check_vector

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1000

# Default penalty constant in c * sigma * sqrt(2 log p / N).
DEFAULT_LAMBDA_C = 0.5

# Nodewise residual variances at or below this are treated as degenerate.
TAU_SQ_FLOOR = 1e-12


def penalty_level(sigma: float, p: int, n_effective: int, lambda_c: float = DEFAULT_LAMBDA_C) -> float:
    """Penalty rule lambda = c * sigma * sqrt(2 log p / N)."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if p < 1 or n_effective < 1:
        raise ValueError("p and n_effective must be positive")
    return lambda_c * sigma * math.sqrt(2.0 * math.log(p) / n_effective)


@dataclass
class LassoProblem:
    """Stacked-block Lasso problem; offset shifts the fitted coefficient."""

    blocks: list[tuple[np.ndarray, np.ndarray]]
    lam: float
    offset: np.ndarray | None = None

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("at least one (z, r) block is required")
        checked = []
        p = None
        for i, (z, r) in enumerate(self.blocks):
            z = check_matrix(z, f"block {i} design")
            r = check_vector(r, f"block {i} response")
            if z.shape[0] != r.size:
                raise ValueError(
                    f"block {i}: design has {z.shape[0]} rows, response has {r.size}"
                )
            if z.shape[0] < 1:
                raise ValueError(f"block {i} is empty")
            if p is None:
                p = z.shape[1]
            elif z.shape[1] != p:
                raise ValueError(
                    f"block {i} has {z.shape[1]} columns, expected {p}"
                )
            checked.append((z, r))
        self.blocks = checked
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and nonnegative, got {self.lam}")
        if self.offset is not None:
            self.offset = check_vector(self.offset, "offset")
            if self.offset.size != p:
                raise ValueError(
                    f"offset has length {self.offset.size}, expected {p}"
                )

    @property
    def p(self) -> int:
        return self.blocks[0][0].shape[1]

    @property
    def n_total(self) -> int:
        return sum(z.shape[0] for z, _ in self.blocks)


@dataclass
class LassoSolution:
    coef: np.ndarray
    objective: float
    iterations: int
    kkt_violation: float
    converged: bool


def _kkt_violation(g: np.ndarray, delta: np.ndarray, lam: float) -> float:
    # g is the scaled correlation (1/N) sum Z.T (r - Z b); stationarity
    # needs g_j = lam * sign(delta_j) on the active set and |g_j| <= lam off it.
    active = delta != 0.0
    viol = 0.0
    if active.any():
        viol = float(np.max(np.abs(g[active] - lam * np.sign(delta[active]))))
    inactive = ~active
    if inactive.any():
        viol = max(viol, max(0.0, float(np.max(np.abs(g[inactive]))) - lam))
    return viol


def _fit_gram(a, qn, r0n, lam, offset, start, tol, max_iter):
    """Coordinate descent on precomputed Gram pieces.

    a = (1/N) sum Z.T Z, qn = (1/N) sum Z.T r, r0n = (1/N) sum r.T r.
    Stopping is scale-relative (thresholds multiply the response RMS) so
    the iterate path is exactly equivariant under rescaling of r and lam.
    """
    p = qn.size
    delta = np.zeros(p) if start is None else start.copy()
    b = delta if offset is None else offset + delta
    b = b.copy()
    rms = math.sqrt(r0n) if r0n > 0 else 0.0
    scale = rms if rms > 0 else 1.0
    change_cap = tol * scale
    kkt_cap = tol * scale
    diag = np.diagonal(a).copy()
    v = a @ b
    sweeps = 0
    converged = False
    kkt = math.inf
    while sweeps < max_iter:
        max_change = 0.0
        for j in range(p):
            ajj = diag[j]
            if ajj <= 0.0:
                continue
            dj = delta[j]
            c = qn[j] - v[j] + ajj * dj
            if c > lam:
                new = (c - lam) / ajj
            elif c < -lam:
                new = (c + lam) / ajj
            else:
                new = 0.0
            if new != dj:
                step = new - dj
                v += a[j] * step
                delta[j] = new
                b[j] += step
                moved = abs(step)
                if moved > max_change:
                    max_change = moved
        sweeps += 1
        v = a @ b  # fresh product keeps incremental drift out of the tests below
        kkt = _kkt_violation(qn - v, delta, lam)
        if max_change <= change_cap and kkt <= kkt_cap:
            converged = True
            break
    objective = 0.5 * (r0n - 2.0 * float(qn @ b) + float(b @ v))
    objective += lam * float(np.abs(delta).sum())
    return delta, objective, sweeps, kkt, converged


def _gram_pieces(blocks):
    z0, r0 = blocks[0]
    p = z0.shape[1]
    n_total = sum(z.shape[0] for z, _ in blocks)
    h = np.zeros((p, p))
    q = np.zeros(p)
    rss = 0.0
    for z, r in blocks:
        h += z.T @ z
        q += z.T @ r
        rss += float(r @ r)
    return h / n_total, q / n_total, rss / n_total, n_total


def lasso_fit(
    problem: LassoProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: np.ndarray | None = None,
) -> LassoSolution:
    """Coordinate-descent Lasso over stacked blocks.

    Converges when the largest coefficient move in a sweep and the KKT
    violation both fall below tol times the response RMS.  Hitting
    max_iter returns the last iterate flagged converged=False rather
    than raising.
    """
    if warm_start is not None:
        warm_start = check_vector(warm_start, "warm_start")
        if warm_start.size != problem.p:
            raise ValueError(
                f"warm_start has length {warm_start.size}, expected {problem.p}"
            )
    a, qn, r0n, _ = _gram_pieces(problem.blocks)
    delta, objective, sweeps, kkt, converged = _fit_gram(
        a, qn, r0n, problem.lam, problem.offset, warm_start, tol, max_iter
    )
    return LassoSolution(
        coef=delta,
        objective=objective,
        iterations=sweeps,
        kkt_violation=kkt,
        converged=converged,
    )


# ======================================================================
# scaled Lasso (joint noise-level estimate)
# ======================================================================


@dataclass
class ScaledLassoFit:
    coef: np.ndarray
    sigma: float
    lambda0: float
    alternations: int


def scaled_lasso(
    z: np.ndarray,
    r: np.ndarray,
    lambda0: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ScaledLassoFit:
    """Alternating Lasso / noise-level estimate.

    Iterates beta <- Lasso(lam = sigma * lambda0) and
    sigma <- ||r - z beta|| / sqrt(n) from sigma = ||r|| / sqrt(n) until
    sigma moves by less than 1e-6 relative.  lambda0 defaults to
    sqrt(2 log p / n).  Scaling r by a constant scales sigma by the same
    constant with an identical iterate path.
    """
    z = check_matrix(z, "z")
    r = check_vector(r, "r")
    n, p = z.shape
    if r.size != n:
        raise ValueError(f"z has {n} rows, r has {r.size}")
    if n < 1 or p < 1:
        raise ValueError("z must have at least one row and one column")
    if lambda0 is None:
        lambda0 = math.sqrt(2.0 * math.log(p) / n)
    elif lambda0 < 0:
        raise ValueError(f"lambda0 must be nonnegative, got {lambda0}")

    a, qn, r0n, _ = _gram_pieces([(z, r)])
    sigma = math.sqrt(r0n)
    if sigma == 0.0:
        raise ValueError("response has zero variance")
    sigma_init = sigma
    coef = np.zeros(p)
    for it in range(100):
        lam = sigma * lambda0
        coef, _, _, _, converged = _fit_gram(a, qn, r0n, lam, None, coef, tol, max_iter)
        if not converged:
            raise ConvergenceError(
                f"scaled lasso inner solve hit {max_iter} sweeps at alternation {it + 1}"
            )
        resid = r - z @ coef
        sigma_new = math.sqrt(float(resid @ resid) / n)
        if sigma_new == 0.0:
            raise ValueError("residual variance collapsed to zero")
        # a noiseless response decays sigma geometrically forever; treat a
        # collapse far below the initial scale as converged-at-zero-noise
        if sigma_new < 1e-8 * sigma_init or abs(sigma_new - sigma) < 1e-6 * sigma:
            return ScaledLassoFit(
                coef=coef, sigma=sigma_new, lambda0=lambda0, alternations=it + 1
            )
        sigma = sigma_new
    raise ConvergenceError("scaled lasso did not settle within 100 alternations")


# ======================================================================
# nodewise precision-matrix estimate
# ======================================================================


@dataclass
class PrecisionEstimate:
    """Row-wise regression inverse of a Gram matrix u.T u / n.

    Row j is omega_j / tau_sq[j] where omega_j has a one at j and minus
    the nodewise Lasso coefficients elsewhere, and tau_sq[j] is the
    corresponding residual scale (1/n) u_j.T (u_j - U_{-j} gamma_j).
    """

    theta: np.ndarray
    lambdas: np.ndarray
    tau_sq: np.ndarray


def nodewise_precision(
    u: np.ndarray,
    lambda_node: float | np.ndarray | None = None,
    lambda_c: float = DEFAULT_LAMBDA_C,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PrecisionEstimate:
    """Nodewise-Lasso precision estimate of (u.T u / n)^(-1).

    lambda_node = None uses the uniform rule c * sqrt(log p / n); a
    scalar applies to every row and a length-p vector sets each row.
    """
    u = check_matrix(u, "u")
    n, p = u.shape
    if n < 2 or p < 1:
        raise ValueError(f"u must have at least 2 rows and 1 column, got {u.shape}")
    if lambda_node is None:
        lambdas = np.full(p, lambda_c * math.sqrt(math.log(p) / n))
    elif np.isscalar(lambda_node):
        lambdas = np.full(p, float(lambda_node))
    else:
        lambdas = check_vector(np.asarray(lambda_node, dtype=np.float64), "lambda_node")
        if lambdas.size != p:
            raise ValueError(f"lambda_node has length {lambdas.size}, expected {p}")
    if np.any(lambdas < 0):
        raise ValueError("nodewise penalties must be nonnegative")

    gram = u.T @ u / n
    theta = np.zeros((p, p))
    tau_sq = np.zeros(p)
    idx = np.arange(p)
    for j in range(p):
        mask = idx != j
        if p == 1:
            gamma = np.zeros(0)
        else:
            a = gram[np.ix_(mask, mask)]
            qn = gram[mask, j]
            r0n = gram[j, j]
            gamma, _, _, _, converged = _fit_gram(
                a, qn, r0n, float(lambdas[j]), None, None, tol, max_iter
            )
            if not converged:
                raise ConvergenceError(f"nodewise regression {j} hit {max_iter} sweeps")
        resid_scale = float(gram[j, j] - (gram[mask, j] @ gamma if p > 1 else 0.0))
        if resid_scale <= TAU_SQ_FLOOR:
            raise ValueError(
                f"nodewise residual variance degenerate at column {j} ({resid_scale:.3e})"
            )
        tau_sq[j] = resid_scale
        theta[j, j] = 1.0 / resid_scale
        if p > 1:
            theta[j, mask] = -gamma / resid_scale
    return PrecisionEstimate(theta=theta, lambdas=lambdas, tau_sq=tau_sq)


# ======================================================================
# cross-validated penalty (alternative tuner, off by default everywhere)
# ======================================================================


def cv_lambda(
    z: np.ndarray,
    r: np.ndarray,
    folds: int = 5,
    grid_size: int = 30,
    rng: RngStream | None = None,
    one_se: bool = False,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> float:
    """K-fold cross-validated penalty over a log-spaced grid.

    The grid runs from the smallest penalty that zeroes every coefficient
    down three decades.  one_se picks the largest penalty within one
    standard error of the best mean validation loss instead of the argmin.
    """
    z = check_matrix(z, "z")
    r = check_vector(r, "r")
    n = z.shape[0]
    if r.size != n:
        raise ValueError(f"z has {n} rows, r has {r.size}")
    if folds < 2 or folds > n:
        raise ValueError(f"folds must lie in [2, {n}], got {folds}")
    if grid_size < 2:
        raise ValueError(f"grid_size must be at least 2, got {grid_size}")
    lam_max = float(np.max(np.abs(z.T @ r))) / n
    if lam_max <= 0:
        return 0.0
    grid = np.geomspace(lam_max, lam_max * 1e-3, grid_size)
    rng = RngStream(0) if rng is None else rng
    order = rng.generator().permutation(n)
    splits = np.array_split(order, folds)

    losses = np.zeros((folds, grid_size))
    for k, hold in enumerate(splits):
        keep = np.setdiff1d(order, hold, assume_unique=True)
        z_tr, r_tr = z[keep], r[keep]
        z_ho, r_ho = z[hold], r[hold]
        a, qn, r0n, _ = _gram_pieces([(z_tr, r_tr)])
        coef = None
        for i, lam in enumerate(grid):
            coef, _, _, _, _ = _fit_gram(a, qn, r0n, float(lam), None, coef, tol, max_iter)
            resid = r_ho - z_ho @ coef
            losses[k, i] = float(resid @ resid) / hold.size
    mean = losses.mean(axis=0)
    best = int(np.argmin(mean))
    if not one_se:
        return float(grid[best])
    se = losses.std(axis=0, ddof=1) / math.sqrt(folds)
    cutoff = mean[best] + se[best]
    for i in range(grid_size):  # grid is descending, so first hit is largest
        if mean[i] <= cutoff:
            return float(grid[i])
    return float(grid[best])
