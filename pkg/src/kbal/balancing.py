"""Balancing residuals, the penalized balancing loss, RKB/WKB/AKB/MB
function selection, and an exact small-instance entropy solver.

Weights follow the mean-one convention: (1/|B|) sum_B o w_hat = 1, so
residuals compare batch means on both sides and the entropy term is a
batch mean as well, keeping the objective's entropy/penalty trade-off
identical to the sum-one formulation up to an additive constant.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import InfeasibleError, NumericError, RequestError
from .kernels import GramMatrix, KernelFit, KernelSpec


class FunctionKind(str, enum.Enum):
    KERNEL_CENTERS = "kernel_centers"
    MOMENTS = "moments"


@dataclasses.dataclass(frozen=True)
class BalancingFunctionSet:
    """J balancing functions: kernel sections K(., c_j) or moment maps.

    Moment function j maps x to mean_k x_k^j (coordinate powers averaged
    over feature dimensions); this is the moment-balancing baseline.
    """

    kind: FunctionKind
    spec: KernelSpec | None = None
    centers: np.ndarray | None = None
    orders: np.ndarray | None = None

    def __post_init__(self):
        if self.kind is FunctionKind.KERNEL_CENTERS:
            if self.centers is None or len(self.centers) == 0 or self.spec is None:
                raise RequestError("kernel_centers needs a kernel spec and >= 1 center")
        else:
            if self.orders is None or len(self.orders) == 0:
                raise RequestError("moments needs >= 1 order")

    @property
    def size(self) -> int:
        if self.kind is FunctionKind.KERNEL_CENTERS:
            return len(self.centers)
        return len(self.orders)

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        """(n, J) matrix of h_j(x) over feature rows."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.kind is FunctionKind.KERNEL_CENTERS:
            return kernels.kernel_matrix(self.spec, features, self.centers)
        return np.stack([(features ** order).mean(axis=1) for order in self.orders],
                        axis=1)


def moment_functions(j: int) -> BalancingFunctionSet:
    if j < 1:
        raise RequestError("moment balancing needs J >= 1")
    return BalancingFunctionSet(kind=FunctionKind.MOMENTS,
                                orders=np.arange(1, j + 1))


@dataclasses.dataclass(frozen=True)
class BalanceReport:
    taus: np.ndarray
    max_abs_tau: float
    entropy_term: float
    penalty_term: float
    loss: float
    gamma: float
    threshold: float


def residuals(weights, mask, h_values) -> np.ndarray:
    """tau_j = (1/|B|) sum_B o w_hat h_j(x) - (1/|B|) sum_B h_j(x)."""
    weights = np.asarray(weights, dtype=np.float64)
    o = np.asarray(mask, dtype=np.float64)
    h = np.atleast_2d(np.asarray(h_values, dtype=np.float64))
    if h.shape[0] != weights.size:
        raise RequestError("balancing function values must cover the batch")
    return (o * weights) @ h / weights.size - h.mean(axis=0)


def residuals_for(weights, mask, fns: BalancingFunctionSet, features) -> np.ndarray:
    return residuals(weights, mask, fns.evaluate(features))


def _entropy(weights, mask) -> float:
    o = np.asarray(mask) == 1
    w = np.asarray(weights, dtype=np.float64)[o]
    if (w <= 0.0).any():
        raise NumericError("balancing weights must be positive on observed pairs")
    return float((w * np.log(w)).sum() / len(weights))


def hinge_excess(taus: np.ndarray, threshold: float) -> np.ndarray:
    """[|tau| - C]_+ per function: [-C - tau]_+ + [tau - C]_+."""
    taus = np.asarray(taus, dtype=np.float64)
    return np.maximum(-threshold - taus, 0.0) + np.maximum(taus - threshold, 0.0)


def balancing_loss(weights, mask, fns: BalancingFunctionSet, features,
                   gamma: float, threshold: float) -> BalanceReport:
    """Entropy plus gamma-weighted hinge penalties on out-of-band residuals."""
    if gamma < 0 or threshold < 0:
        raise RequestError("gamma and threshold must be nonnegative")
    taus = residuals_for(weights, mask, fns, features)
    entropy = _entropy(weights, mask)
    penalty = float(hinge_excess(taus, threshold).sum())
    return BalanceReport(taus=taus,
                         max_abs_tau=float(np.abs(taus).max()),
                         entropy_term=entropy,
                         penalty_term=penalty,
                         loss=entropy + gamma * penalty,
                         gamma=gamma,
                         threshold=threshold)


def wkb_loss(weights, mask, gram: GramMatrix, gamma: float, *,
             normalized: bool = False) -> float:
    """Entropy plus gamma times the worst-case quadratic with v = o w_hat - 1."""
    weights = np.asarray(weights, dtype=np.float64)
    o = np.asarray(mask, dtype=np.float64)
    v = o * weights - 1.0
    worst = (kernels.normalized_worst_case(gram, v) if normalized
             else kernels.worst_case_quadratic(gram, v))
    return _entropy(weights, mask) + gamma * worst


def choose_functions_rkb(batch_features, spec: KernelSpec, j: int,
                         rng: np.random.Generator) -> BalancingFunctionSet:
    """J kernel centers sampled uniformly without replacement from the batch."""
    batch_features = np.atleast_2d(np.asarray(batch_features, dtype=np.float64))
    n = batch_features.shape[0]
    if j < 1 or j > n:
        raise RequestError(f"J={j} outside [1, {n}]")
    idx = rng.choice(n, size=j, replace=False)
    return BalancingFunctionSet(kind=FunctionKind.KERNEL_CENTERS, spec=spec,
                                centers=batch_features[idx].copy())


class AkbSelection(NamedTuple):
    functions: BalancingFunctionSet
    indices: np.ndarray
    fit: KernelFit


def choose_functions_akb(batch_features, spec: KernelSpec, j: int,
                         current_errors, ridge: float) -> AkbSelection:
    """Fit errors in the RKHS over the batch, keep the J largest-|alpha| centers."""
    batch_features = np.atleast_2d(np.asarray(batch_features, dtype=np.float64))
    gram_matrix = kernels.gram(spec, batch_features)
    fit = kernels.fit_errors(gram_matrix, current_errors, ridge)
    indices = kernels.select_top_j(fit, j)
    fns = BalancingFunctionSet(kind=FunctionKind.KERNEL_CENTERS, spec=spec,
                               centers=batch_features[indices].copy())
    return AkbSelection(functions=fns, indices=indices, fit=fit)


def solve_exact_entropy(mask, fns: BalancingFunctionSet, features,
                        *, tol: float = 1e-10, max_iter: int = 500,
                        max_observed: int = 500) -> np.ndarray:
    """Exact solution of the constrained entropy-balancing program.

    Maximizes entropy subject to exact residual constraints and mean-one
    normalization over the instance.  The Lagrangian dual is an
    exponential-family moment-matching problem solved by damped Newton
    iterations to gradient norm <= 1e-10 (the dual gradient equals the
    residual vector, so returned weights satisfy |tau_j| <= 1e-8).
    Returns weights over observed pairs only.
    """
    mask = np.asarray(mask).ravel()
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = mask.size
    obs = np.nonzero(mask == 1)[0]
    if obs.size == 0:
        raise InfeasibleError("no observed pairs to weight")
    if obs.size > max_observed:
        raise RequestError(f"exact solver is limited to {max_observed} observed "
                           f"pairs; got {obs.size}")

    h_all = fns.evaluate(features)
    targets = h_all.mean(axis=0)
    h_obs = h_all[obs]

    eta = np.zeros(fns.size)
    taus = np.zeros(fns.size)
    for _ in range(max_iter):
        logits = h_obs @ eta
        logits -= logits.max()
        q = np.exp(logits)
        q /= q.sum()
        taus = q @ h_obs - targets
        if np.linalg.norm(taus) <= tol:
            break
        centered = h_obs - q @ h_obs
        hessian = (centered * q[:, None]).T @ centered
        hessian[np.diag_indices_from(hessian)] += 1e-12
        try:
            step = np.linalg.solve(hessian, taus)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, taus, rcond=None)[0]

        # Backtracking on the dual objective log-sum-exp(H eta) - eta . targets.
        def dual(candidate):
            z = h_obs @ candidate
            m = z.max()
            return m + np.log(np.exp(z - m).sum()) - candidate @ targets

        base = dual(eta)
        t = 1.0
        while t > 1e-12 and dual(eta - t * step) > base - 1e-4 * t * (taus @ step):
            t *= 0.5
        eta -= t * step
        if not np.isfinite(eta).all() or np.linalg.norm(eta) > 1e8:
            worst = int(np.argmax(np.abs(taus)))
            raise InfeasibleError(
                f"balancing constraints infeasible; worst residual is function "
                f"{worst} with tau={taus[worst]:.3e}")
    else:
        worst = int(np.argmax(np.abs(taus)))
        raise InfeasibleError(
            f"entropy dual did not converge; worst residual is function "
            f"{worst} with tau={taus[worst]:.3e}")

    logits = h_obs @ eta
    logits -= logits.max()
    q = np.exp(logits)
    q /= q.sum()
    return n * q
