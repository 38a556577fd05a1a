"""Training-free network score from rectifier activation codes.

Each probe input switches every rectifier on or off; the resulting binary
code identifies the linear region the input falls in.  Inputs that land in
well-separated regions give a well-conditioned Hamming kernel and a large
log-determinant.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor

from .tensor import NetworkInstance, forward

NEG_INFINITY = float("-inf")
PIVOT_TOLERANCE = 1e-12
DEFAULT_PROBE_SIZE = 32


@dataclass(frozen=True)
class KernelMatrix:
    entries: np.ndarray
    n_activations: int

    @property
    def order(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ScoreReport:
    score: float
    n: int
    n_activations: int
    condition: float
    degenerate: bool


def probe_batch(seed, input_shape, size: int = DEFAULT_PROBE_SIZE) -> np.ndarray:
    """Standard-normal probe inputs ``(size, C, H, W)`` shared across candidates."""
    return np.random.default_rng(seed).standard_normal((size, *input_shape))


def activation_codes(net: NetworkInstance, params: dict, batch: np.ndarray) -> np.ndarray:
    if len(batch) < 1:
        raise ValueError("probe batch must contain at least one input")
    _, codes = forward(net, params, batch, trace=True)
    return codes


def kernel_matrix(codes) -> KernelMatrix:
    """``K[i, j] = N_A - hamming(c_i, c_j)``."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        lengths = {len(c) for c in codes}
        raise ValueError(f"codes must share one length, got lengths {sorted(lengths)}")
    c = codes.astype(np.float64)
    n_a = c.shape[1]
    # agreements = ones in common + zeros in common
    k = c @ c.T + (1.0 - c) @ (1.0 - c).T
    return KernelMatrix(np.rint(k).astype(np.int64), n_a)


def log_abs_det(entries: np.ndarray, scale: float) -> float:
    """Sum of log |pivots| from partial-pivoting LU; ``-inf`` when any pivot
    falls below ``PIVOT_TOLERANCE * scale``."""
    with warnings.catch_warnings():
        # exact zero pivots are expected here and reported as -inf below
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, _ = lu_factor(np.asarray(entries, dtype=np.float64), check_finite=True)
    pivots = np.abs(np.diag(lu))
    if np.any(pivots < PIVOT_TOLERANCE * scale):
        return NEG_INFINITY
    return float(np.sum(np.log(pivots)))


def score_codes(codes) -> ScoreReport:
    codes = np.asarray(codes, dtype=bool)
    kern = kernel_matrix(codes)
    n, n_a = codes.shape
    duplicate = len(np.unique(codes, axis=0)) < n
    value = NEG_INFINITY if duplicate else log_abs_det(kern.entries, max(n_a, 1))
    eig = np.linalg.eigvalsh(kern.entries.astype(np.float64))
    condition = float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf
    degenerate = duplicate or value == NEG_INFINITY
    return ScoreReport(value, n, n_a, condition, degenerate)


def score(net: NetworkInstance, params: dict, batch: np.ndarray) -> ScoreReport:
    """``log |K_H|`` of the untrained network on ``batch``."""
    return score_codes(activation_codes(net, params, batch))
