"""The alternating joint learning loop (imputation -> weights -> prediction),
baseline training paths, validation, and hyperparameter sweeps."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
import time
from pathlib import Path

import numpy as np

from . import balancing, data, estimators, kernels, metrics, models
from .data import Batch, Dataset, DrawScope, FeatureSource
from .errors import ConfigError, NumericError, UnavailableError
from .estimators import ErrorForm, EstimatorName
from .kernels import KernelFamily, KernelSpec


class Strategy(str, enum.Enum):
    NONE = "none"
    CE_PROPENSITY = "ce_propensity"
    RKB = "rkb"
    WKB = "wkb"
    AKB = "akb"
    MB = "mb"


KERNEL_STRATEGIES = (Strategy.RKB, Strategy.WKB, Strategy.AKB)
BALANCING_STRATEGIES = KERNEL_STRATEGIES + (Strategy.MB,)

LR_GRID = (0.01, 0.03, 0.05, 0.1)
GAMMA_GRID = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
# The printed grid in the source is non-monotone; this is the corrected one.
C_GRID = (1e-6, 1e-5, 5e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
SIGMA_SQ_GRID = (0.5, 1.0, 5.0)
WEIGHT_DECAY_RANGE = (1e-6, 5e-3)


@dataclasses.dataclass
class TrainConfig:
    """Every knob of one training run; field names double as config-file keys."""

    strategy: Strategy = Strategy.AKB
    estimator: EstimatorName = EstimatorName.KBDR
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN
    sigma_sq: float = 1.0
    j: int = 10
    gamma: float = 5.0
    threshold: float = 1e-3
    ridge: float = 1e-3
    batch_size_imputation: int = 128
    batch_size_weight: int = 1024
    batch_size_prediction: int = 1024
    steps_imputation: int = 0  # 0 = one epoch-equivalent
    steps_weight: int = 0
    steps_prediction: int = 0
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    embedding_dim: int = 8
    feature_source: FeatureSource = FeatureSource.EMBEDDING_CONCAT
    lr_prediction: float = 0.05
    lr_imputation: float = 0.05
    lr_weight: float = 0.01  # balancing is noise-sensitive; gentler steps
    lr_propensity: float = 0.05
    wd_prediction: float = 1e-5
    wd_imputation: float = 1e-5
    wd_weight: float = 1e-3  # damps drift across refreshed balancing targets
    wd_propensity: float = 1e-5
    propensity_clip: float = 0.05
    weight_embedding_dim: int = 0  # 0 = same as embedding_dim
    eq5_errors: str = "auto"  # auto | observed_only | imputed
    wkb_normalized: bool = False
    standardize_features: bool = True
    allow_off_grid: bool = False
    validation_fraction: float = 0.1
    metric_k: int = 5

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.estimator = EstimatorName(self.estimator)
        self.kernel_family = KernelFamily(self.kernel_family)
        self.feature_source = FeatureSource(self.feature_source)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(family=self.kernel_family, sigma_sq=self.sigma_sq)


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    field = _CONFIG_FIELDS[name]
    kind = field.type
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key '{name}' expects a boolean, got '{raw}'")
    if kind == "int":
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"config key '{name}' expects an integer") from exc
    if kind == "float":
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"config key '{name}' expects a number") from exc
    return raw


def parse_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a flat ``key = value`` config file (``#`` comments allowed)."""
    values: dict = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = body.split("=", 1)
            key = key.strip()
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{line_no}: unknown config key '{key}'")
            values[key] = _parse_value(key, raw)
    if overrides:
        values.update(overrides)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_text(config: TrainConfig) -> str:
    lines = []
    for field in dataclasses.fields(TrainConfig):
        value = getattr(config, field.name)
        if isinstance(value, enum.Enum):
            value = value.value
        lines.append(f"{field.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(config_text(config).encode()).hexdigest()


def _check_grid(name, value, grid, allow_off_grid):
    if allow_off_grid or any(value == g for g in grid):
        return
    raise ConfigError(f"{name}={value} is outside the declared grid {grid}; "
                      f"set allow_off_grid to override")


def validate_config(config: TrainConfig) -> None:
    est, strat = config.estimator, config.strategy
    if est is EstimatorName.IDEAL:
        raise ConfigError("the ideal loss is an oracle, not a training estimator")
    if est is EstimatorName.NAIVE and strat is not Strategy.NONE:
        raise ConfigError("estimator naive pairs with strategy none")
    if est in (EstimatorName.IPS, EstimatorName.SNIPS, EstimatorName.DR) \
            and strat is not Strategy.CE_PROPENSITY:
        raise ConfigError(f"estimator {est.value} requires strategy ce_propensity")
    if est in (EstimatorName.KBIPS, EstimatorName.KBDR) \
            and strat not in BALANCING_STRATEGIES:
        raise ConfigError(f"estimator {est.value} requires a kernel or moment strategy")
    if config.j < 1:
        raise ConfigError("J must be >= 1")
    if config.max_epochs < 1 or config.patience < 0:
        raise ConfigError("max_epochs must be >= 1 and patience >= 0")
    if config.ridge < 0:
        raise ConfigError("ridge must be nonnegative")
    if config.eq5_errors not in ("auto", "observed_only", "imputed"):
        raise ConfigError("eq5_errors must be auto, observed_only or imputed")
    if not 0.0 < config.validation_fraction <= 1.0:
        raise ConfigError("validation_fraction must be in (0, 1]")
    if config.metric_k < 1:
        raise ConfigError("metric_k must be >= 1")
    for name in ("lr_prediction", "lr_imputation", "lr_weight", "lr_propensity"):
        _check_grid(name, getattr(config, name), LR_GRID, config.allow_off_grid)
    for name in ("wd_prediction", "wd_imputation", "wd_weight", "wd_propensity"):
        value = getattr(config, name)
        if not config.allow_off_grid and not \
                (WEIGHT_DECAY_RANGE[0] <= value <= WEIGHT_DECAY_RANGE[1]):
            raise ConfigError(f"{name}={value} outside {WEIGHT_DECAY_RANGE}; "
                              f"set allow_off_grid to override")
    if strat in BALANCING_STRATEGIES:
        _check_grid("gamma", config.gamma, GAMMA_GRID, config.allow_off_grid)
    if strat in (Strategy.RKB, Strategy.AKB, Strategy.MB):
        _check_grid("threshold", config.threshold, C_GRID, config.allow_off_grid)
    if strat in KERNEL_STRATEGIES:
        _check_grid("sigma_sq", config.sigma_sq, SIGMA_SQ_GRID, config.allow_off_grid)


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    imputation_loss: float | None
    weight_loss: float | None
    prediction_loss: float | None
    val_auc: float | None
    max_abs_tau: float | None
    selected_centers: tuple[int, ...]
    wall_clock: float


@dataclasses.dataclass
class TrainTrace:
    records: list[EpochRecord] = dataclasses.field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise NumericError("trace epochs must be strictly increasing")
        self.records.append(record)

    def to_csv(self, path) -> None:
        # Wall-clock stays in memory only: persisted outputs must be
        # byte-identical across runs with the same seed and config.
        def fmt(x):
            return "" if x is None else repr(x)

        with open(path, "w") as fh:
            fh.write("epoch,imputation_loss,weight_loss,prediction_loss,"
                     "val_auc,max_abs_tau,selected_centers\n")
            for r in self.records:
                centers = "|".join(str(c) for c in r.selected_centers)
                fh.write(",".join([str(r.epoch), fmt(r.imputation_loss),
                                   fmt(r.weight_loss), fmt(r.prediction_loss),
                                   fmt(r.val_auc), fmt(r.max_abs_tau),
                                   centers]) + "\n")


def balancing_weight_step(weight_model: models.FactorizationModel,
                          optimizer: models.OptimizerState,
                          users, items, loss_spec,
                          renorm_users, renorm_items, n_pairs: int) -> None:
    """One weight-phase update: Adam on the constraint-tangent gradient.

    Renormalization undoes any uniform shift of the log-weights, and Adam's
    sign-like steps turn an all-same-sign gradient into exactly such a
    shift, freezing the weights.  Centering the per-pair score gradient
    (weighted mean over observed pairs removed) projects the update onto
    the tangent space of the mean-one constraint before the Adam step.
    """
    dscore = models.analytic_dscore(weight_model, users, items, loss_spec)
    o = np.asarray(loss_spec.mask, dtype=np.float64)
    scores = weight_model.scores(users, items)
    w = np.where(o == 1, np.exp(np.where(o == 1, scores, 0.0)), 0.0)
    total = w.sum()
    if total > 0:
        dscore = dscore - o * ((w * dscore).sum() / total)
    grads = models.pair_gradients(weight_model, users, items, dscore)
    models.gradient_step(weight_model, optimizer, grads)
    scale = weight_model.predict(renorm_users, renorm_items).sum() / n_pairs
    if not np.isfinite(scale) or scale <= 0:
        raise NumericError("weight renormalization produced a bad scale")
    weight_model.global_bias -= np.log(scale)


class _Run:
    """Mutable state of one training run."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        validate_config(config)
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng([config.seed, 0])
        self.bundle = models.init_bundle(
            dataset.n_users, dataset.n_items, config.embedding_dim, self.rng,
            weight_dim=config.weight_embedding_dim or None)
        self.opts = {
            "prediction": models.OptimizerState(config.lr_prediction, config.wd_prediction),
            "imputation": models.OptimizerState(config.lr_imputation, config.wd_imputation),
            "weight": models.OptimizerState(config.lr_weight, config.wd_weight),
            "propensity": models.OptimizerState(config.lr_propensity, config.wd_propensity),
        }
        self.obs_users, self.obs_items = dataset.observed_pairs()
        self.kernel = config.kernel_spec()
        self._features: data.FeatureMap | None = None
        self.val = self._validation_split()
        self.first_gram: kernels.GramMatrix | None = None
        self.balance_rows: list[tuple] = []

    # -- helpers -----------------------------------------------------------

    def _validation_split(self):
        ds, cfg = self.dataset, self.config
        if ds.test_mask is None:
            return None
        users, items = ds.test_pairs()
        labels = ds.test_ratings[users, items]
        full_grid = int(ds.test_mask.sum()) == ds.n_pairs
        if full_grid and cfg.validation_fraction < 1.0:
            n_val = max(2, int(round(users.size * cfg.validation_fraction)))
            pick = np.random.default_rng([cfg.seed, 1]).choice(
                users.size, size=n_val, replace=False)
            return users[pick], items[pick], labels[pick]
        return users, items, labels

    def _steps(self, configured: int, population: int, batch_size: int) -> int:
        return configured if configured > 0 else max(1, math.ceil(population / batch_size))

    def _sample(self, scope: DrawScope, batch_size: int) -> Batch:
        population = (self.obs_users.size if scope is DrawScope.OBSERVED_ONLY
                      else self.dataset.n_pairs)
        return data.sample_batch(self.dataset, scope, min(batch_size, population),
                                 self.rng)

    def _observed_errors(self, users, items) -> np.ndarray:
        preds = self.bundle.prediction.predict(users, items)
        return estimators.pointwise_error(preds, self.dataset.ratings[users, items],
                                          ErrorForm.CROSS_ENTROPY)

    def _batch_weights(self, users, items) -> np.ndarray:
        return models.balancing_weights(self.bundle.weight, users, items)

    def _clipped_propensities(self, users, items) -> np.ndarray:
        p = self.bundle.propensity.predict(users, items)
        return estimators.clip_propensities(p, self.config.propensity_clip)

    # -- phases ------------------------------------------------------------

    def imputation_phase(self) -> float:
        cfg = self.config
        steps = self._steps(cfg.steps_imputation, self.obs_users.size,
                            cfg.batch_size_imputation)
        last = math.nan
        for _ in range(steps):
            batch = self._sample(DrawScope.OBSERVED_ONLY, cfg.batch_size_imputation)
            errors = self._observed_errors(batch.users, batch.items)
            weights = self._phase_weights(batch.users, batch.items)
            spec = models.ImputationLoss(errors=errors, weights=weights,
                                         mask=np.ones(batch.size),
                                         normalizer=batch.size)
            grads = models.analytic_gradients(self.bundle.imputation,
                                              batch.users, batch.items, spec)
            last = models.loss_value(self.bundle.imputation,
                                     batch.users, batch.items, spec)
            models.gradient_step(self.bundle.imputation, self.opts["imputation"], grads)
        return last

    def _phase_weights(self, users, items) -> np.ndarray:
        if self.config.strategy in BALANCING_STRATEGIES:
            return self._batch_weights(users, items)
        if self.config.strategy is Strategy.CE_PROPENSITY:
            return 1.0 / self._clipped_propensities(users, items)
        return np.ones(users.size)

    def propensity_phase(self) -> float:
        cfg = self.config
        steps = self._steps(cfg.steps_weight, self.dataset.n_pairs,
                            cfg.batch_size_weight)
        last = math.nan
        for _ in range(steps):
            batch = self._sample(DrawScope.ALL_PAIRS, cfg.batch_size_weight)
            spec = models.PropensityLoss(
                mask=self.dataset.mask[batch.users, batch.items])
            grads = models.analytic_gradients(self.bundle.propensity,
                                              batch.users, batch.items, spec)
            last = models.loss_value(self.bundle.propensity,
                                     batch.users, batch.items, spec)
            models.gradient_step(self.bundle.propensity, self.opts["propensity"], grads)
        return last

    def _selection_errors(self, batch: Batch) -> np.ndarray:
        """Error targets for the RKHS fit: true errors where observed,
        imputed errors elsewhere (imputed mode only)."""
        mask = self.dataset.mask[batch.users, batch.items]
        errors = np.zeros(batch.size)
        obs = mask == 1
        if obs.any():
            errors[obs] = self._observed_errors(batch.users[obs], batch.items[obs])
        if (~obs).any():
            errors[~obs] = models.imputed_errors(self.bundle.imputation,
                                                 batch.users[~obs], batch.items[~obs])
        if self.config.estimator is EstimatorName.KBDR:
            # Footnote-1 mode: the fit target is e - e_hat.
            errors = errors - models.imputed_errors(self.bundle.imputation,
                                                    batch.users, batch.items)
        return errors

    def _eq5_mode(self) -> str:
        if self.config.eq5_errors != "auto":
            return self.config.eq5_errors
        return ("imputed" if self.config.estimator in
                (EstimatorName.KBDR, EstimatorName.DR) else "observed_only")

    def _choose_functions(self):
        cfg = self.config
        strat = cfg.strategy
        if strat is Strategy.MB:
            return balancing.moment_functions(cfg.j), ()
        if strat is Strategy.RKB:
            batch = self._sample(DrawScope.ALL_PAIRS, cfg.batch_size_weight)
            feats = self._features.vectors(batch.users, batch.items)
            return balancing.choose_functions_rkb(feats, self.kernel, cfg.j,
                                                  self.rng), ()
        # AKB: fit the current errors in the RKHS over a fresh batch.
        scope = (DrawScope.OBSERVED_ONLY if self._eq5_mode() == "observed_only"
                 else DrawScope.ALL_PAIRS)
        batch = self._sample(scope, cfg.batch_size_weight)
        feats = self._features.vectors(batch.users, batch.items)
        if scope is DrawScope.OBSERVED_ONLY:
            errors = self._observed_errors(batch.users, batch.items)
            if cfg.estimator is EstimatorName.KBDR:
                errors = errors - models.imputed_errors(self.bundle.imputation,
                                                        batch.users, batch.items)
        else:
            errors = self._selection_errors(batch)
        j = min(cfg.j, batch.size)
        selection = balancing.choose_functions_akb(feats, self.kernel, j,
                                                   errors, cfg.ridge)
        flat = (batch.users * self.dataset.n_items + batch.items)[selection.indices]
        if self.first_gram is None:
            self.first_gram = kernels.gram(self.kernel, feats)
        return selection.functions, tuple(int(i) for i in flat)

    def _refresh_features(self) -> None:
        cfg = self.config
        features = data.build_features(self.dataset, cfg.feature_source,
                                       self.bundle.prediction)
        if cfg.standardize_features and \
                cfg.feature_source is FeatureSource.EMBEDDING_CONCAT:
            features = data.standardize_features(features)
        self._features = features

    def weight_phase(self, epoch: int):
        cfg = self.config
        self._refresh_features()
        fns, selected = (None, ())
        if cfg.strategy is not Strategy.WKB:
            fns, selected = self._choose_functions()
        steps = self._steps(cfg.steps_weight, self.dataset.n_pairs,
                            cfg.batch_size_weight)
        last = math.nan
        for _ in range(steps):
            batch = self._sample(DrawScope.ALL_PAIRS, cfg.batch_size_weight)
            mask = self.dataset.mask[batch.users, batch.items]
            feats = self._features.vectors(batch.users, batch.items)
            if cfg.strategy is Strategy.WKB:
                gram_matrix = kernels.gram(self.kernel, feats)
                if self.first_gram is None:
                    self.first_gram = gram_matrix
                spec = models.WorstCaseLoss(mask=mask, gram=gram_matrix,
                                            gamma=cfg.gamma,
                                            normalized=cfg.wkb_normalized)
            else:
                spec = models.BalancingLoss(mask=mask, h_values=fns.evaluate(feats),
                                            gamma=cfg.gamma, threshold=cfg.threshold)
            last = models.loss_value(self.bundle.weight,
                                     batch.users, batch.items, spec)
            balancing_weight_step(self.bundle.weight, self.opts["weight"],
                                  batch.users, batch.items, spec,
                                  self.obs_users, self.obs_items,
                                  self.dataset.n_pairs)
        max_tau = None
        if fns is not None:
            report = self.full_balance_report(fns)
            max_tau = report.max_abs_tau
            self.balance_rows.append((epoch, cfg.strategy.value, fns.size,
                                      cfg.gamma, cfg.threshold, report.max_abs_tau,
                                      report.entropy_term, report.penalty_term))
        return last, max_tau, selected

    def full_balance_report(self, fns) -> balancing.BalanceReport:
        """Residual diagnostics over the whole grid with current weights."""
        users, items = np.divmod(np.arange(self.dataset.n_pairs), self.dataset.n_items)
        weights = np.ones(self.dataset.n_pairs)
        obs_flat = self.obs_users * self.dataset.n_items + self.obs_items
        weights[obs_flat] = self._batch_weights(self.obs_users, self.obs_items)
        return balancing.balancing_loss(weights, self.dataset.mask.ravel(), fns,
                                        self._features.vectors(users, items),
                                        self.config.gamma, self.config.threshold)

    def prediction_phase(self) -> float:
        cfg = self.config
        est = cfg.estimator
        scope = (DrawScope.OBSERVED_ONLY if est is EstimatorName.NAIVE
                 else DrawScope.ALL_PAIRS)
        population = (self.obs_users.size if scope is DrawScope.OBSERVED_ONLY
                      else self.dataset.n_pairs)
        steps = self._steps(cfg.steps_prediction, population,
                            cfg.batch_size_prediction)
        last = math.nan
        for _ in range(steps):
            batch = self._sample(scope, cfg.batch_size_prediction)
            spec = self._prediction_loss(batch)
            if spec is None:
                continue
            grads = models.analytic_gradients(self.bundle.prediction,
                                              batch.users, batch.items, spec)
            last = models.loss_value(self.bundle.prediction,
                                     batch.users, batch.items, spec)
            models.gradient_step(self.bundle.prediction, self.opts["prediction"], grads)
        return last

    def _prediction_loss(self, batch: Batch) -> models.WeightedErrorLoss | None:
        est = self.config.estimator
        outcomes = np.where(self.dataset.mask[batch.users, batch.items] == 1,
                            self.dataset.ratings[batch.users, batch.items], 0.0)
        if est is EstimatorName.NAIVE:
            return models.WeightedErrorLoss(outcomes=outcomes,
                                            coeffs=np.ones(batch.size),
                                            normalizer=batch.size)
        mask = self.dataset.mask[batch.users, batch.items].astype(np.float64)
        if est in (EstimatorName.IPS, EstimatorName.SNIPS, EstimatorName.DR):
            inv_p = mask / self._clipped_propensities(batch.users, batch.items)
        else:
            scores = self.bundle.weight.scores(batch.users, batch.items)
            inv_p = np.where(mask == 1,
                             np.exp(np.where(mask == 1, scores, 0.0)), 0.0)
        if est is EstimatorName.SNIPS:
            denom = inv_p.sum()
            if denom == 0.0:
                return None
            return models.WeightedErrorLoss(outcomes=outcomes, coeffs=inv_p,
                                            normalizer=denom)
        offset = 0.0
        if est in (EstimatorName.DR, EstimatorName.KBDR):
            e_hat = models.imputed_errors(self.bundle.imputation,
                                          batch.users, batch.items)
            offset = float((e_hat * (1.0 - inv_p)).sum() / batch.size)
        return models.WeightedErrorLoss(outcomes=outcomes, coeffs=inv_p,
                                        normalizer=batch.size, offset=offset)

    def validation_auc(self) -> float | None:
        if self.val is None:
            return None
        users, items, labels = self.val
        scores = self.bundle.prediction.predict(users, items)
        try:
            return metrics.auc(scores, labels)
        except UnavailableError:
            return 0.5


def train(dataset: Dataset, config: TrainConfig, phase_callback=None,
          diagnostics_dir=None) -> tuple[models.ModelBundle, TrainTrace]:
    """Run the joint learning loop; returns the best-validation bundle.

    Phases per epoch follow the pseudocode order: imputation (DR-style
    estimators only), then balancing weights or propensity, then prediction.
    Deterministic given the config seed.
    """
    run = _Run(dataset, config)
    cfg = config
    trace = TrainTrace()
    best_auc = -math.inf
    best_bundle = run.bundle.copy()
    patience_left = cfg.patience

    run_imputation = cfg.estimator in (EstimatorName.DR, EstimatorName.KBDR)
    run_weights = cfg.strategy in BALANCING_STRATEGIES
    run_propensity = cfg.strategy is Strategy.CE_PROPENSITY

    def emit(phase):
        if phase_callback is not None:
            phase_callback(phase, run.bundle)

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        imp_loss = weight_loss = max_tau = None
        selected: tuple[int, ...] = ()
        if run_imputation:
            imp_loss = run.imputation_phase()
            _abort_on_nan(imp_loss, "imputation", epoch)
            emit("imputation")
        if run_weights:
            weight_loss, max_tau, selected = run.weight_phase(epoch)
            _abort_on_nan(weight_loss, "weight", epoch)
            emit("weight")
        if run_propensity:
            weight_loss = run.propensity_phase()
            _abort_on_nan(weight_loss, "propensity", epoch)
            emit("propensity")
        pred_loss = run.prediction_phase()
        _abort_on_nan(pred_loss, "prediction", epoch)
        emit("prediction")

        val_auc = run.validation_auc()
        trace.append(EpochRecord(epoch=epoch, imputation_loss=imp_loss,
                                 weight_loss=weight_loss, prediction_loss=pred_loss,
                                 val_auc=val_auc, max_abs_tau=max_tau,
                                 selected_centers=selected,
                                 wall_clock=time.perf_counter() - tic))
        if val_auc is None:
            continue
        if val_auc > best_auc:
            best_auc = val_auc
            best_bundle = run.bundle.copy()
            patience_left = cfg.patience
        else:
            patience_left -= 1
            if patience_left < 0:
                break

    if diagnostics_dir is not None:
        out = Path(diagnostics_dir)
        write_balance_diagnostics(out / "balance_diagnostics.csv", run.balance_rows)
        if run.first_gram is not None:
            kernels.dump_gram_csv(run.first_gram, out / "gram_dump.csv")
    return (best_bundle if run.val is not None else run.bundle), trace


def _abort_on_nan(value, phase, epoch):
    if value is not None and not math.isfinite(value):
        raise NumericError(f"non-finite loss in {phase} phase at epoch {epoch}")


def validate(bundle: models.ModelBundle, dataset: Dataset, k: int) -> metrics.MetricReport:
    """AUC / NDCG@k / F1@k of the prediction model on the unbiased test grid."""
    if dataset.test_mask is None:
        raise UnavailableError("dataset has no held-out test grid")
    users, items = dataset.test_pairs()
    labels = dataset.test_ratings[users, items]
    scores = bundle.prediction.predict(users, items)
    boundaries = np.flatnonzero(np.diff(users)) + 1
    user_scores = np.split(scores, boundaries)
    user_labels = np.split(labels, boundaries)
    eligible = sum(1 for lab in user_labels if lab.sum() > 0)
    return metrics.MetricReport(auc=metrics.auc(scores, labels),
                                ndcg_at_k=metrics.ndcg_at_k(user_scores, user_labels, k),
                                f1_at_k=metrics.f1_at_k(user_scores, user_labels, k),
                                k=k, n_eval_users=eligible)


SWEEP_AXES = {"J": "j", "gamma": "gamma", "sigma_sq": "sigma_sq", "C": "threshold"}


def sweep(dataset: Dataset, base_config: TrainConfig, axis: str,
          values) -> list[tuple[float, metrics.MetricReport]]:
    """One independent train+validate per value, shared seed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    field = SWEEP_AXES[axis]
    results = []
    for value in values:
        cast = int(value) if field == "j" else float(value)
        config = dataclasses.replace(base_config, **{field: cast},
                                     allow_off_grid=True)
        bundle, _ = train(dataset, config)
        results.append((value, validate(bundle, dataset, config.metric_k)))
    return results


def write_sweep_csv(path, axis: str, results, seed: int) -> None:
    with open(path, "w") as fh:
        fh.write(f"{axis},auc,ndcg,f1,seed\n")
        for value, report in results:
            fh.write(f"{value},{report.auc!r},{report.ndcg_at_k!r},"
                     f"{report.f1_at_k!r},{seed}\n")


def write_balance_diagnostics(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,strategy,J,gamma,C,max_abs_tau,entropy,penalty\n")
        for row in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x)
                              for x in row) + "\n")
