"""Gaussian/exponential kernels, Gram matrices, ridge fits, and the
worst-case balancing quadratic."""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .errors import ConfigError, NumericError, RequestError, ShapeError


class KernelFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


@dataclasses.dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily
    sigma_sq: float

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not self.sigma_sq > 0:
            raise ConfigError("kernel bandwidth sigma_sq must be positive")


@dataclasses.dataclass(frozen=True)
class GramMatrix:
    """Kernel evaluations over one batch of pair features.

    ``entries`` is exactly symmetric (upper triangle computed once, mirrored)
    with exact unit diagonal, and positive semidefinite up to numerical noise.
    """

    centers: np.ndarray
    entries: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclasses.dataclass(frozen=True)
class KernelFit:
    """Ridge-regularized kernel regression of an error vector on a batch."""

    alphas: np.ndarray
    ridge: float
    fitted_values: np.ndarray
    residual_mse: float


def _sq_dists(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)[:, None] + (z * z).sum(axis=1)[None, :] - 2.0 * x @ z.T
    return np.maximum(sq, 0.0)


def _apply_kernel(spec: KernelSpec, sq_dists: np.ndarray) -> np.ndarray:
    if spec.family is KernelFamily.GAUSSIAN:
        return np.exp(-sq_dists / (2.0 * spec.sigma_sq))
    return np.exp(-np.sqrt(sq_dists) / (2.0 * spec.sigma_sq))


def kernel_eval(spec: KernelSpec, x: np.ndarray, x_prime: np.ndarray) -> float:
    """K(x, x'); 1 exactly iff the vectors coincide."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise ShapeError(f"feature dimensions differ: {x.shape} vs {x_prime.shape}")
    diff = x - x_prime
    return float(_apply_kernel(spec, np.array([[diff @ diff]]))[0, 0])


def kernel_matrix(spec: KernelSpec, x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(len(x), len(centers)) cross-kernel block."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if x.shape[1] != centers.shape[1]:
        raise ShapeError("feature dimensions differ between points and centers")
    return _apply_kernel(spec, _sq_dists(x, centers))


def gram(spec: KernelSpec, features: np.ndarray) -> GramMatrix:
    """Symmetric unit-diagonal Gram matrix over a nonempty feature batch."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise RequestError("gram requires a nonempty batch")
    full = _apply_kernel(spec, _sq_dists(features, features))
    upper = np.triu(full, k=1)
    entries = upper + upper.T + np.eye(features.shape[0])
    return GramMatrix(centers=features, entries=entries)


def fit_errors(gram_matrix: GramMatrix, errors: np.ndarray, ridge: float) -> KernelFit:
    """Solve the ridge-regularized normal equations (G G + ridge*|B| G) a = G e.

    For ridge > 0 the returned coefficients are the unique
    (G + ridge*|B| I)^{-1} e; ridge = 0 falls back to the pseudo-inverse.
    """
    errors = np.asarray(errors, dtype=np.float64)
    n = gram_matrix.size
    if errors.shape != (n,):
        raise ShapeError(f"error vector length {errors.shape} != batch size {n}")
    if np.isnan(errors).any():
        raise NumericError("NaN in error vector")
    if ridge < 0:
        raise ConfigError("ridge must be nonnegative")
    g = gram_matrix.entries
    if ridge > 0:
        alphas = np.linalg.solve(g + ridge * n * np.eye(n), errors)
    else:
        alphas = np.linalg.pinv(g) @ errors
    fitted = g @ alphas
    residual_mse = float(np.mean((errors - fitted) ** 2))
    return KernelFit(alphas=alphas, ridge=ridge, fitted_values=fitted,
                     residual_mse=residual_mse)


def select_top_j(fit: KernelFit, j: int) -> np.ndarray:
    """Indices of the j largest |alpha|, ties broken by lower center index."""
    n = fit.alphas.size
    if j < 1 or j > n:
        raise RequestError(f"J={j} outside [1, {n}]")
    order = np.argsort(-np.abs(fit.alphas), kind="stable")
    return order[:j]


def worst_case_quadratic(gram_matrix: GramMatrix, v: np.ndarray) -> float:
    """(1/|B|^2) v' G v: the squared-bias supremum over the unit RKHS ball."""
    v = np.asarray(v, dtype=np.float64)
    n = gram_matrix.size
    if v.shape != (n,):
        raise ShapeError(f"vector length {v.shape} != Gram size {n}")
    value = float(v @ gram_matrix.entries @ v) / (n * n)
    return max(value, 0.0)


def normalized_worst_case(gram_matrix: GramMatrix, v: np.ndarray) -> float:
    """||P_G v||^2 / |B|: the supremum under the empirical-norm constraint.

    P_G projects onto the Gram column space; with a full-rank Gram this
    reduces to ||v||^2/|B| and is kernel-independent, which is why the
    RKHS-ball form above is the default objective.
    """
    v = np.asarray(v, dtype=np.float64)
    n = gram_matrix.size
    if v.shape != (n,):
        raise ShapeError(f"vector length {v.shape} != Gram size {n}")
    projected = gram_matrix.entries @ (np.linalg.pinv(gram_matrix.entries) @ v)
    return float(projected @ projected) / n


def dump_gram_csv(gram_matrix: GramMatrix, path) -> None:
    """Debug dump of centers and entries, written when diagnostics are on."""
    with open(path, "w") as fh:
        fh.write("# centers\n")
        for row in gram_matrix.centers:
            fh.write(",".join("%.17g" % v for v in row) + "\n")
        fh.write("# entries\n")
        for row in gram_matrix.entries:
            fh.write(",".join("%.17g" % v for v in row) + "\n")
