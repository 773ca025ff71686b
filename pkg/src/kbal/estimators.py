"""Every loss the debiasing pipeline estimates or trains against.

All operations are pure array arithmetic.  Per-pair errors live on the
observed set O unless stated otherwise; full-grid quantities are flattened
vectors over D.  Binary cross-entropy predictions are clipped to
[1e-8, 1 - 1e-8], so errors are bounded by E0 = -log(1e-8).
"""

from __future__ import annotations

import dataclasses
import enum
import json

import numpy as np

from .errors import NumericError, UnavailableError

PREDICTION_CLIP = 1e-8
MAX_ERROR = -float(np.log(PREDICTION_CLIP))  # E0, the cross-entropy error bound
DEFAULT_PROPENSITY_CLIP = 0.05


class ErrorForm(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    SQUARED = "squared"


class EstimatorName(str, enum.Enum):
    IDEAL = "ideal"
    NAIVE = "naive"
    IPS = "ips"
    SNIPS = "snips"
    DR = "dr"
    KBIPS = "kbips"
    KBDR = "kbdr"


def pointwise_error(prediction, outcome, form: ErrorForm = ErrorForm.CROSS_ENTROPY):
    """e = L(r_hat, r); vectorized over arrays, scalar in scalar out."""
    form = ErrorForm(form)
    prediction = np.asarray(prediction, dtype=np.float64)
    outcome = np.asarray(outcome, dtype=np.float64)
    if form is ErrorForm.SQUARED:
        err = (prediction - outcome) ** 2
    else:
        clipped = np.clip(prediction, PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
        err = -outcome * np.log(clipped) - (1.0 - outcome) * np.log1p(-clipped)
    return float(err) if err.ndim == 0 else err


def ideal_loss(errors_full) -> float:
    """Mean error over the full grid D (needs ground truth for every pair)."""
    errors_full = np.asarray(errors_full, dtype=np.float64)
    if errors_full.size == 0 or np.isnan(errors_full).any():
        raise UnavailableError("ideal loss needs errors for every pair in D")
    return float(errors_full.mean())


def naive_loss(errors_obs) -> float:
    """Mean error over observed pairs only."""
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    if errors_obs.size == 0:
        raise UnavailableError("naive loss needs at least one observed pair")
    return float(errors_obs.mean())


def clip_propensities(propensities, clip: float = DEFAULT_PROPENSITY_CLIP) -> np.ndarray:
    return np.clip(np.asarray(propensities, dtype=np.float64), clip, 1.0)


def ips_loss(errors_obs, propensities_obs, n_total: int,
             clip: float = DEFAULT_PROPENSITY_CLIP) -> float:
    """(1/|D|) sum_O e / p_hat, propensities clipped below at ``clip``."""
    p = clip_propensities(propensities_obs, clip)
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    return float((errors_obs / p).sum() / n_total)


def snips_loss(errors_obs, propensities_obs,
               clip: float = DEFAULT_PROPENSITY_CLIP) -> float:
    """Self-normalized IPS: (sum_O e/p_hat) / (sum_O 1/p_hat)."""
    p = clip_propensities(propensities_obs, clip)
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    denom = (1.0 / p).sum()
    if errors_obs.size == 0 or denom == 0.0:
        raise UnavailableError("SNIPS undefined without observed pairs")
    return float((errors_obs / p).sum() / denom)


def kbips_loss(errors_obs, weights_obs, n_total: int) -> float:
    """(1/|D|) sum_D o w_hat e with mean-one balancing weights."""
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    weights_obs = np.asarray(weights_obs, dtype=np.float64)
    return float((weights_obs * errors_obs).sum() / n_total)


def dr_loss(errors_obs, imputed_obs, propensities_obs, imputed_full,
            clip: float = DEFAULT_PROPENSITY_CLIP) -> float:
    """(1/|D|) sum_D [e_hat + o (e - e_hat) / p_hat]."""
    p = clip_propensities(propensities_obs, clip)
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    imputed_obs = np.asarray(imputed_obs, dtype=np.float64)
    imputed_full = np.asarray(imputed_full, dtype=np.float64)
    n_total = imputed_full.size
    correction = ((errors_obs - imputed_obs) / p).sum()
    return float((imputed_full.sum() + correction) / n_total)


def kbdr_loss(errors_obs, imputed_obs, weights_obs, imputed_full) -> float:
    """(1/|D|) sum_D [e_hat + o w_hat (e - e_hat)]."""
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    imputed_obs = np.asarray(imputed_obs, dtype=np.float64)
    weights_obs = np.asarray(weights_obs, dtype=np.float64)
    imputed_full = np.asarray(imputed_full, dtype=np.float64)
    n_total = imputed_full.size
    correction = (weights_obs * (errors_obs - imputed_obs)).sum()
    return float((imputed_full.sum() + correction) / n_total)


def imputation_loss(errors_obs, imputed_obs, weights_obs, n_total: int) -> float:
    """(1/|D|) sum_O w_hat (e_hat - e)^2, the imputation-model training loss."""
    errors_obs = np.asarray(errors_obs, dtype=np.float64)
    imputed_obs = np.asarray(imputed_obs, dtype=np.float64)
    weights_obs = np.asarray(weights_obs, dtype=np.float64)
    return float((weights_obs * (imputed_obs - errors_obs) ** 2).sum() / n_total)


def propensity_ce_loss(propensities, mask) -> float:
    """Summed binary cross-entropy of the observation indicator against p_hat."""
    p = np.clip(np.asarray(propensities, dtype=np.float64),
                PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
    o = np.asarray(mask, dtype=np.float64)
    if np.isnan(p).any():
        raise NumericError("NaN propensity")
    return float((-o * np.log(p) - (1.0 - o) * np.log1p(-p)).sum())


def empirical_bias(estimate: float, errors_full) -> float:
    """Squared deviation of an estimate from the ideal loss."""
    return (float(estimate) - ideal_loss(errors_full)) ** 2


def kbips_signed_bias(errors_full, mask_full, weights_obs) -> float:
    """(1/|D|) sum_D (o w_hat - 1) e, the signed KBIPS bias decomposition."""
    errors_full = np.asarray(errors_full, dtype=np.float64)
    mask_full = np.asarray(mask_full).ravel()
    weighted = (np.asarray(weights_obs, dtype=np.float64)
                * errors_full.ravel()[mask_full == 1]).sum()
    return float((weighted - errors_full.sum()) / errors_full.size)


def kbdr_signed_bias(errors_full, imputed_full, mask_full, weights_obs) -> float:
    """(1/|D|) sum_D (o w_hat - 1)(e - e_hat), the signed KBDR decomposition."""
    residual = (np.asarray(errors_full, dtype=np.float64)
                - np.asarray(imputed_full, dtype=np.float64))
    return kbips_signed_bias(residual, mask_full,
                             np.asarray(weights_obs, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class EstimatorReport:
    name: EstimatorName
    value: float
    bias_sq: float | None = None
    max_abs_tau: float | None = None

    def to_json(self, epoch: int | None = None, seed: int | None = None) -> str:
        record: dict = {"name": self.name.value, "value": self.value}
        if self.bias_sq is not None:
            record["bias_sq"] = self.bias_sq
        if self.max_abs_tau is not None:
            record["max_abs_tau"] = self.max_abs_tau
        if epoch is not None:
            record["epoch"] = epoch
        if seed is not None:
            record["seed"] = seed
        return json.dumps(record)
