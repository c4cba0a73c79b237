"""Latent factor extraction by principal components.

A design matrix x (n rows, p columns) is split as x = factors @ loadings.T
+ idiosyncratic, with the factor count picked by the eigenvalue-ratio
rule when not supplied.  Downstream regressions run on the idiosyncratic
part after the response has been purged of the factor span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from transfarm.numerics import check_matrix, check_vector, sym_eig

# Eigenvalues below this fraction of the leading one are floored before
# ratios are formed, so trailing zeros cannot fake a huge ratio.
EIGENVALUE_FLOOR_REL = 1e-12

# Default cap on candidate ranks: min(n // 2, MAX_RANK_CAP).
MAX_RANK_CAP = 15


@dataclass
class FactorDecomposition:
    """Split of a design matrix into common and idiosyncratic parts.

    factors has unit-scaled columns (factors.T @ factors / n = I), the
    loadings satisfy loadings = x.T @ factors / n, and idiosyncratic is
    the residual, so x = factors @ loadings.T + idiosyncratic exactly.
    With an intercept the first design column must be constant one; it is
    excluded from the eigenanalysis, its loading row is zero, and it is
    passed through unchanged into the idiosyncratic part.
    """

    rank: int
    factors: np.ndarray
    loadings: np.ndarray
    idiosyncratic: np.ndarray
    gram_eigenvalues: np.ndarray
    intercept: bool = False

    @property
    def n(self) -> int:
        return self.factors.shape[0]


def default_max_rank(n: int) -> int:
    return min(n // 2, MAX_RANK_CAP)


def select_rank(gram_eigenvalues: np.ndarray, max_rank: int) -> int:
    """Eigenvalue-ratio rank estimate.

    Floors the spectrum at EIGENVALUE_FLOOR_REL times the top eigenvalue,
    then returns the index i in 1..max_rank maximising the ratio of the
    i-th to the (i+1)-th eigenvalue (smallest index wins ties).  Invariant
    to positive rescaling of the spectrum.
    """
    values = check_vector(np.asarray(gram_eigenvalues, dtype=np.float64), "eigenvalues")
    if max_rank < 1:
        raise ValueError(f"max_rank must be at least 1, got {max_rank}")
    if max_rank + 1 > values.size:
        raise ValueError(
            f"need at least max_rank + 1 = {max_rank + 1} eigenvalues, got {values.size}"
        )
    top = values[0]
    if top <= 0.0:
        raise ValueError("leading eigenvalue must be positive")
    floored = np.maximum(values, EIGENVALUE_FLOOR_REL * top)
    ratios = floored[:max_rank] / floored[1 : max_rank + 1]
    return int(np.argmax(ratios)) + 1


def decompose(
    x: np.ndarray,
    rank: int | None = None,
    intercept: bool = False,
    max_rank: int | None = None,
) -> FactorDecomposition:
    """Principal-component factor split of a design matrix.

    rank = None picks the factor count by the eigenvalue-ratio rule over
    at most max_rank candidates (default min(n // 2, 15)); rank = 0 is a
    valid degenerate split with empty factors and idiosyncratic = x.
    """
    x = check_matrix(x, "x")
    n, p = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    if intercept:
        if p < 2:
            raise ValueError("intercept decomposition needs at least 2 columns")
        if not np.all(x[:, 0] == 1.0):
            raise ValueError("intercept flag set but column 1 is not constant one")
        body = x[:, 1:]
    else:
        body = x
    limit = min(n, body.shape[1])
    if rank is not None and (rank < 0 or rank > limit):
        raise ValueError(f"rank must lie in [0, {limit}], got {rank}")

    gram = body @ body.T
    eig = sym_eig(gram)
    gram_eigenvalues = eig.eigenvalues
    if rank is None:
        cap = default_max_rank(n) if max_rank is None else max_rank
        # the gram spectrum dies at the column count, so an uncapped ratio
        # search on a narrow design would always pick the full column rank
        # and leave an all-zero idiosyncratic block
        cap = min(cap, limit // 2)
        if cap < 1:
            raise ValueError(
                f"automatic rank selection needs at least 2 usable columns, got {limit}"
            )
        rank = select_rank(gram_eigenvalues, cap)

    factors = np.sqrt(n) * eig.eigenvectors[:, :rank]
    loadings_body = body.T @ factors / n
    idio_body = body - factors @ loadings_body.T
    if intercept:
        loadings = np.vstack([np.zeros((1, rank)), loadings_body])
        idiosyncratic = np.hstack([np.ones((n, 1)), idio_body])
    else:
        loadings = loadings_body
        idiosyncratic = idio_body
    return FactorDecomposition(
        rank=rank,
        factors=factors,
        loadings=loadings,
        idiosyncratic=idiosyncratic,
        gram_eigenvalues=gram_eigenvalues,
        intercept=intercept,
    )


def residualize(y: np.ndarray, decomp: FactorDecomposition) -> np.ndarray:
    """Project the estimated factor span out of a response vector."""
    y = check_vector(y, "y")
    f = decomp.factors
    if y.size != f.shape[0]:
        raise ValueError(f"y has {y.size} rows, decomposition has {f.shape[0]}")
    if decomp.rank == 0:
        return y.copy()
    return y - f @ (f.T @ y) / f.shape[0]


def factor_coefficients(y: np.ndarray, decomp: FactorDecomposition) -> np.ndarray:
    """Regression of y on the unit-scaled factors, i.e. factors.T @ y / n."""
    y = check_vector(y, "y")
    f = decomp.factors
    if y.size != f.shape[0]:
        raise ValueError(f"y has {y.size} rows, decomposition has {f.shape[0]}")
    return f.T @ y / f.shape[0]
