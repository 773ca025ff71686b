"""Matrix-factorization models for prediction, imputation, balancing weights
and propensities, the shared Adam optimizer, and closed-form gradients for
every training loss (no autograd).
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from . import balancing, estimators, kernels
from .errors import ConfigError, FormatError, NumericError, RequestError
from .estimators import MAX_ERROR, PREDICTION_CLIP, ErrorForm

PARAM_KEYS = ("user_emb", "item_emb", "user_bias", "item_bias", "global_bias")


class Link(str, enum.Enum):
    SIGMOID = "sigmoid"
    EXP = "exp"
    IDENTITY = "identity"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _link_apply(link: Link, scores: np.ndarray) -> np.ndarray:
    if link is Link.SIGMOID:
        return _sigmoid(scores)
    if link is Link.EXP:
        return np.exp(scores)
    return scores.astype(np.float64, copy=True)


def _link_derivative(link: Link, values: np.ndarray) -> np.ndarray:
    # Derivative of the link wrt the raw score, expressed via the output value.
    if link is Link.SIGMOID:
        return values * (1.0 - values)
    if link is Link.EXP:
        return values
    return np.ones_like(values)


@dataclasses.dataclass
class FactorizationModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray  # 0-d array so every parameter is an ndarray
    link: Link

    def __post_init__(self):
        self.link = Link(self.link)
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise FormatError("user and item embeddings must share the latent dim")

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def param_count(self) -> int:
        return sum(self.params()[k].size for k in PARAM_KEYS)

    def params(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, key) for key in PARAM_KEYS}

    def copy(self) -> "FactorizationModel":
        return FactorizationModel(*(getattr(self, k).copy() for k in PARAM_KEYS),
                                  link=self.link)

    def _check_indices(self, users: np.ndarray, items: np.ndarray) -> None:
        if users.size == 0:
            return
        if users.min() < 0 or users.max() >= self.n_users \
                or items.min() < 0 or items.max() >= self.n_items:
            raise RequestError("pair index out of range")

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        self._check_indices(users, items)
        return ((self.user_emb[users] * self.item_emb[items]).sum(axis=1)
                + self.user_bias[users] + self.item_bias[items]
                + float(self.global_bias))

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return _link_apply(self.link, self.scores(users, items))

    def forward(self, user: int, item: int) -> float:
        return float(self.predict(np.array([user]), np.array([item]))[0])


def init_factorization(n_users: int, n_items: int, dim: int, link: Link,
                       rng: np.random.Generator, scale: float = 0.01) -> FactorizationModel:
    """Embeddings uniform(-scale, scale), biases zero."""
    return FactorizationModel(
        user_emb=rng.uniform(-scale, scale, size=(n_users, dim)),
        item_emb=rng.uniform(-scale, scale, size=(n_items, dim)),
        user_bias=np.zeros(n_users),
        item_bias=np.zeros(n_items),
        global_bias=np.zeros(()),
        link=link)


@dataclasses.dataclass
class ModelBundle:
    """The four jointly trained models; all share the same grid shape."""

    prediction: FactorizationModel
    imputation: FactorizationModel
    weight: FactorizationModel
    propensity: FactorizationModel | None = None

    def __post_init__(self):
        shapes = {(m.n_users, m.n_items)
                  for m in (self.prediction, self.imputation, self.weight,
                            self.propensity) if m is not None}
        if len(shapes) != 1:
            raise FormatError("bundle models must share n_users and n_items")

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            prediction=self.prediction.copy(),
            imputation=self.imputation.copy(),
            weight=self.weight.copy(),
            propensity=None if self.propensity is None else self.propensity.copy())


def init_bundle(n_users: int, n_items: int, dim: int, rng: np.random.Generator,
                weight_dim: int | None = None) -> ModelBundle:
    # A Gaussian kernel section over concatenated embeddings factorizes into
    # a user-block times item-block product, so the exp-link weight model
    # needs rank >= J to represent J balanced sections; its dimension is
    # therefore allowed to differ from the other models'.
    return ModelBundle(
        prediction=init_factorization(n_users, n_items, dim, Link.SIGMOID, rng),
        imputation=init_factorization(n_users, n_items, dim, Link.SIGMOID, rng),
        weight=init_factorization(n_users, n_items, weight_dim or dim,
                                  Link.EXP, rng),
        propensity=init_factorization(n_users, n_items, dim, Link.SIGMOID, rng))


def imputed_errors(imputation: FactorizationModel, users, items) -> np.ndarray:
    """e_hat in (0, E0]: softplus of the raw score, capped at the error bound.

    At a zero-initialized model this gives log 2, the cross-entropy error of
    an uninformed prediction, so DR-style corrections start on the right
    scale.
    """
    scores = imputation.scores(users, items)
    return np.minimum(np.logaddexp(0.0, scores), MAX_ERROR)


def imputed_error_dscore(imputation: FactorizationModel, users, items) -> np.ndarray:
    """Derivative of ``imputed_errors`` wrt the raw score (sigmoid, 0 at the cap)."""
    scores = imputation.scores(users, items)
    inside = np.logaddexp(0.0, scores) < MAX_ERROR
    return np.where(inside, _sigmoid(scores), 0.0)


def balancing_weights(weight_model: FactorizationModel, users, items) -> np.ndarray:
    """w_hat = exp(score) > 0 by construction."""
    return weight_model.predict(users, items)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay.

@dataclasses.dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.learning_rate, self.weight_decay, self.beta1,
                              self.beta2, self.eps, self.step_count,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def gradient_step(model: FactorizationModel, state: OptimizerState,
                  grads: dict[str, np.ndarray]) -> None:
    """One in-place adaptive-moment update with decoupled weight decay."""
    params = model.params()
    for key in PARAM_KEYS:
        if np.isnan(grads[key]).any():
            raise NumericError(f"NaN gradient in parameter group '{key}'")
    state.step_count += 1
    t = state.step_count
    for key in PARAM_KEYS:
        grad = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        params[key] -= state.learning_rate * (
            m_hat / (np.sqrt(v_hat) + state.eps)
            + state.weight_decay * params[key])


# ---------------------------------------------------------------------------
# Loss specifications: each carries everything needed to evaluate the scalar
# loss and its exact gradient for one model on one batch.

@dataclasses.dataclass(frozen=True)
class WeightedErrorLoss:
    """offset + (1/normalizer) sum_k coeffs_k * e(prediction_k, outcome_k).

    Covers ideal/naive/IPS/SNIPS/DR/KBIPS/KBDR prediction-model training:
    the coefficient encodes o/p_hat or o*w_hat, the offset the constant
    imputation part of DR-style losses.
    """

    outcomes: np.ndarray
    coeffs: np.ndarray
    normalizer: float
    offset: float = 0.0
    form: ErrorForm = ErrorForm.CROSS_ENTROPY


@dataclasses.dataclass(frozen=True)
class ImputationLoss:
    """(1/normalizer) sum_k o_k w_k (e_hat_k - e_k)^2 for the imputation model."""

    errors: np.ndarray
    weights: np.ndarray
    mask: np.ndarray
    normalizer: float


@dataclasses.dataclass(frozen=True)
class BalancingLoss:
    """Eq.-6-style penalized balancing loss for the weight model."""

    mask: np.ndarray
    h_values: np.ndarray
    gamma: float
    threshold: float


@dataclasses.dataclass(frozen=True)
class WorstCaseLoss:
    """Entropy plus the worst-case kernel quadratic for the weight model."""

    mask: np.ndarray
    gram: kernels.GramMatrix
    gamma: float
    normalized: bool = False


@dataclasses.dataclass(frozen=True)
class PropensityLoss:
    """Summed observation cross-entropy for the propensity model."""

    mask: np.ndarray


LossSpec = (WeightedErrorLoss | ImputationLoss | BalancingLoss
            | WorstCaseLoss | PropensityLoss)


def _error_and_dscore(model, users, items, outcomes, form):
    values = model.predict(users, items)
    err = estimators.pointwise_error(values, outcomes, form)
    dlink = _link_derivative(model.link, values)
    if form is ErrorForm.SQUARED:
        derr = 2.0 * (values - outcomes) * dlink
    else:
        inside = (values > PREDICTION_CLIP) & (values < 1.0 - PREDICTION_CLIP)
        clipped = np.clip(values, PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
        dloss = -outcomes / clipped + (1.0 - outcomes) / (1.0 - clipped)
        derr = np.where(inside, dloss * dlink, 0.0)
    return err, derr


def loss_value(model: FactorizationModel, users, items, loss: LossSpec) -> float:
    """Scalar value of a loss spec; the exact quantity analytic_gradients differentiates."""
    users = np.asarray(users)
    items = np.asarray(items)
    if isinstance(loss, WeightedErrorLoss):
        err, _ = _error_and_dscore(model, users, items, loss.outcomes,
                                   ErrorForm(loss.form))
        return loss.offset + float((loss.coeffs * err).sum() / loss.normalizer)
    if isinstance(loss, ImputationLoss):
        e_hat = imputed_errors(model, users, items)
        o = np.asarray(loss.mask, dtype=np.float64)
        return float((o * loss.weights * (e_hat - loss.errors) ** 2).sum()
                     / loss.normalizer)
    if isinstance(loss, BalancingLoss):
        w = _masked_weights(model, users, items, loss.mask)
        taus = balancing.residuals(w, loss.mask, loss.h_values)
        entropy = _weight_entropy(w, loss.mask)
        return entropy + loss.gamma * float(
            balancing.hinge_excess(taus, loss.threshold).sum())
    if isinstance(loss, WorstCaseLoss):
        w = _masked_weights(model, users, items, loss.mask)
        return balancing.wkb_loss(w, loss.mask, loss.gram, loss.gamma,
                                  normalized=loss.normalized)
    if isinstance(loss, PropensityLoss):
        return estimators.propensity_ce_loss(model.predict(users, items), loss.mask)
    raise ConfigError(f"unsupported loss spec {type(loss).__name__}")


def _weight_entropy(weights: np.ndarray, mask) -> float:
    o = np.asarray(mask, dtype=np.float64)
    return float((o * weights * np.log(weights)).sum() / weights.size)


def _masked_weights(model, users, items, mask) -> np.ndarray:
    """exp-link weights with unobserved entries pinned to 1.

    Unobserved pairs never enter a balancing objective, but their raw
    scores are unconstrained and can overflow exp; pinning them avoids
    0 * inf poisoning the observed terms.
    """
    scores = model.scores(users, items)
    observed = np.asarray(mask) == 1
    return np.where(observed, np.exp(np.where(observed, scores, 0.0)), 1.0)


def analytic_gradients(model: FactorizationModel, users, items,
                       loss: LossSpec) -> dict[str, np.ndarray]:
    """Exact gradient of ``loss_value`` wrt the model's parameters."""
    users = np.asarray(users)
    items = np.asarray(items)
    dscore = analytic_dscore(model, users, items, loss)
    return pair_gradients(model, users, items, dscore)


def analytic_dscore(model: FactorizationModel, users, items,
                    loss: LossSpec) -> np.ndarray:
    """Per-pair derivative of the loss wrt the raw factorization scores."""
    users = np.asarray(users)
    items = np.asarray(items)
    if isinstance(loss, WeightedErrorLoss):
        _, derr = _error_and_dscore(model, users, items, loss.outcomes,
                                    ErrorForm(loss.form))
        dscore = loss.coeffs * derr / loss.normalizer
    elif isinstance(loss, ImputationLoss):
        e_hat = imputed_errors(model, users, items)
        o = np.asarray(loss.mask, dtype=np.float64)
        dscore = (2.0 * o * loss.weights * (e_hat - loss.errors)
                  * imputed_error_dscore(model, users, items)
                  / loss.normalizer)
    elif isinstance(loss, BalancingLoss):
        if model.link is not Link.EXP:
            raise ConfigError("balancing loss expects the exp-link weight model")
        scores = model.scores(users, items)
        o = np.asarray(loss.mask, dtype=np.float64)
        ow = np.where(o == 1, np.exp(np.where(o == 1, scores, 0.0)), 0.0)
        n = scores.size
        taus = balancing.residuals(ow, loss.mask, loss.h_values)
        signs = ((taus > loss.threshold).astype(np.float64)
                 - (taus < -loss.threshold).astype(np.float64))
        h = np.atleast_2d(np.asarray(loss.h_values, dtype=np.float64))
        dscore = ((scores + 1.0) * ow / n
                  + loss.gamma * (h @ signs) * ow / n)
    elif isinstance(loss, WorstCaseLoss):
        if model.link is not Link.EXP:
            raise ConfigError("worst-case loss expects the exp-link weight model")
        scores = model.scores(users, items)
        o = np.asarray(loss.mask, dtype=np.float64)
        ow = np.where(o == 1, np.exp(np.where(o == 1, scores, 0.0)), 0.0)
        n = scores.size
        v = ow - 1.0
        g = loss.gram.entries
        if loss.normalized:
            projected = g @ (np.linalg.pinv(g) @ v)
            quad_grad = 2.0 * projected / n
        else:
            quad_grad = 2.0 * (g @ v) / (n * n)
        dscore = (scores + 1.0) * ow / n + loss.gamma * quad_grad * ow
    elif isinstance(loss, PropensityLoss):
        values = model.predict(users, items)
        o = np.asarray(loss.mask, dtype=np.float64)
        inside = (values > PREDICTION_CLIP) & (values < 1.0 - PREDICTION_CLIP)
        clipped = np.clip(values, PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
        dloss = -o / clipped + (1.0 - o) / (1.0 - clipped)
        dscore = np.where(inside,
                          dloss * _link_derivative(model.link, values), 0.0)
    else:
        raise ConfigError(f"unsupported loss spec {type(loss).__name__}")
    return dscore


def pair_gradients(model: FactorizationModel, users, items,
                   dscore: np.ndarray) -> dict[str, np.ndarray]:
    """Scatter per-pair score gradients into parameter-shaped arrays."""
    grads = {key: np.zeros_like(arr) for key, arr in model.params().items()}
    np.add.at(grads["user_emb"], users, dscore[:, None] * model.item_emb[items])
    np.add.at(grads["item_emb"], items, dscore[:, None] * model.user_emb[users])
    np.add.at(grads["user_bias"], users, dscore)
    np.add.at(grads["item_bias"], items, dscore)
    grads["global_bias"] = np.asarray(dscore.sum())
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: one npz holding all four models plus the config hash.
# np.savez is byte-deterministic, so identical bundles give identical files.

_CHECKPOINT_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path, config_hash: str = "") -> None:
    arrays: dict[str, np.ndarray] = {
        "meta.version": np.asarray(_CHECKPOINT_VERSION),
        "meta.config_hash": np.asarray(config_hash),
        "meta.has_propensity": np.asarray(int(bundle.propensity is not None)),
    }
    roles = {"prediction": bundle.prediction, "imputation": bundle.imputation,
             "weight": bundle.weight}
    if bundle.propensity is not None:
        roles["propensity"] = bundle.propensity
    for role, model in roles.items():
        for key in PARAM_KEYS:
            arrays[f"{role}.{key}"] = getattr(model, key)
        arrays[f"{role}.link"] = np.asarray(model.link.value)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[ModelBundle, str]:
    with np.load(path) as blob:
        if int(blob["meta.version"]) != _CHECKPOINT_VERSION:
            raise FormatError("unknown checkpoint version")

        def read(role):
            return FactorizationModel(
                *(blob[f"{role}.{key}"].copy() for key in PARAM_KEYS),
                link=Link(str(blob[f"{role}.link"])))

        propensity = read("propensity") if int(blob["meta.has_propensity"]) else None
        bundle = ModelBundle(prediction=read("prediction"),
                             imputation=read("imputation"),
                             weight=read("weight"),
                             propensity=propensity)
        return bundle, str(blob["meta.config_hash"])
