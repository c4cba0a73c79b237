"""Transfer learning for factor-augmented sparse linear regression.

A target dataset with few observations borrows strength from auxiliary
source datasets whose regression coefficients are close to the target's
in l1 distance.  Every dataset is first split into a low-rank common
component and an idiosyncratic remainder; the sparse coefficient vector
on the idiosyncratic part is then estimated by a pooled Lasso followed
by a target-only correction.  Informative sources can be detected from
data, and simultaneous confidence intervals come from a multiplier
bootstrap on a debiased estimate.
"""

from transfarm.numerics import RngStream, SymEigResult, sym_eig
from transfarm.factor import FactorDecomposition, decompose, select_rank
from transfarm.solver import LassoProblem, LassoSolution, lasso_fit, scaled_lasso
from transfarm.transfer import (
    Dataset,
    DetectionReport,
    TransferConfig,
    TransferFit,
    detect_and_fit,
    detect_sources,
    two_step_fit,
)
from transfarm.inference import (
    InferenceResult,
    adequacy_test,
    full_inference,
    simultaneous_cis,
)
from transfarm.simlab import SimConfig, SimResult, generate, run_experiment

__all__ = [
    "RngStream",
    "SymEigResult",
    "sym_eig",
    "FactorDecomposition",
    "decompose",
    "select_rank",
    "LassoProblem",
    "LassoSolution",
    "lasso_fit",
    "scaled_lasso",
    "Dataset",
    "DetectionReport",
    "TransferConfig",
    "TransferFit",
    "detect_and_fit",
    "detect_sources",
    "two_step_fit",
    "InferenceResult",
    "adequacy_test",
    "full_inference",
    "simultaneous_cis",
    "SimConfig",
    "SimResult",
    "generate",
    "run_experiment",
]

__version__ = "0.1.0"
