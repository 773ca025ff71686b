"""Dataset loading, MNAR synthesis, per-pair features, and batch sampling.

The on-disk matrix format is Coat-compatible: ASCII, one user per line,
whitespace-separated integers, 0 = unobserved.  Synthetic datasets are
serialized to the same format with binary outcomes encoded as {1, 2}
(1 = negative, 2 = positive) so that observed negatives are not aliased
with the 0 = unobserved sentinel; they reload with ``binarize_threshold=2``.
"""

from __future__ import annotations

import dataclasses
import enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, RequestError


class FeatureSource(str, enum.Enum):
    ONE_HOT_CONCAT = "one_hot_concat"
    EMBEDDING_CONCAT = "embedding_concat"


class DrawScope(str, enum.Enum):
    ALL_PAIRS = "all_pairs_D"
    OBSERVED_ONLY = "observed_only_O"


def _freeze(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is not None:
        arr.flags.writeable = False
    return arr


@dataclasses.dataclass(frozen=True)
class Dataset:
    """A full user-item grid with observation mask and optional oracles.

    ``ratings`` holds binarized outcomes (0/1) wherever ``mask`` is 1;
    entries with ``mask == 0`` are undefined and must never be read other
    than through the mask.  ``true_propensities`` is present for synthetic
    data only.  ``test_ratings``/``test_mask`` hold the unbiased held-out
    grid (the full outcome grid for synthetic data).
    """

    ratings: np.ndarray
    mask: np.ndarray
    true_propensities: np.ndarray | None = None
    test_ratings: np.ndarray | None = None
    test_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.ratings.shape != self.mask.shape:
            raise FormatError("ratings and mask shapes differ")
        obs = self.mask == 1
        vals = self.ratings[obs]
        if vals.size and not np.isin(vals, (0.0, 1.0)).all():
            raise FormatError("observed ratings must be binary after loading")
        if self.true_propensities is not None:
            p = self.true_propensities
            if p.shape != self.mask.shape:
                raise FormatError("propensity grid shape differs from mask")
            if not ((p > 0.0) & (p <= 1.0)).all():
                raise FormatError("true propensities must lie in (0, 1]")
        if (self.test_ratings is None) != (self.test_mask is None):
            raise FormatError("test ratings and test mask must come together")
        for arr in (self.ratings, self.mask, self.true_propensities,
                    self.test_ratings, self.test_mask):
            _freeze(arr)

    @property
    def n_users(self) -> int:
        return self.ratings.shape[0]

    @property
    def n_items(self) -> int:
        return self.ratings.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.ratings.size

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def observed_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(users, items) index arrays of observed entries, row-major order."""
        return np.nonzero(self.mask == 1)

    def test_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.test_mask is None:
            raise RequestError("dataset has no held-out test grid")
        return np.nonzero(self.test_mask == 1)


@dataclasses.dataclass(frozen=True)
class FeatureMap:
    """Pair features x_{u,i} as a concatenation of per-user and per-item blocks.

    Blocks are snapshots: once constructed they never change, even if the
    model they were copied from keeps training.
    """

    source: FeatureSource
    user_block: np.ndarray
    item_block: np.ndarray

    def __post_init__(self):
        _freeze(self.user_block)
        _freeze(self.item_block)

    @property
    def dim(self) -> int:
        return self.user_block.shape[1] + self.item_block.shape[1]

    def vectors(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """(len(users), dim) matrix of features for the given pairs."""
        return np.hstack([self.user_block[users], self.item_block[items]])

    def vector(self, user: int, item: int) -> np.ndarray:
        return self.vectors(np.array([user]), np.array([item]))[0]


@dataclasses.dataclass(frozen=True)
class Batch:
    """A set of unique user-item pairs drawn from one scope."""

    users: np.ndarray
    items: np.ndarray
    scope: DrawScope

    def __post_init__(self):
        if self.users.shape != self.items.shape:
            raise FormatError("batch index arrays must align")
        _freeze(self.users)
        _freeze(self.items)

    @property
    def size(self) -> int:
        return self.users.size


def _read_matrix(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                row = [int(tok) for tok in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: non-integer entry") from exc
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"{path}:{line_no}: ragged row "
                                  f"({len(row)} columns, expected {width})")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: empty matrix file")
    return np.asarray(rows, dtype=np.int64)


def _binarize(raw: np.ndarray, threshold: int) -> tuple[np.ndarray, np.ndarray]:
    mask = (raw != 0).astype(np.int8)
    ratings = np.where((raw >= threshold) & (mask == 1), 1.0, 0.0)
    return ratings, mask


def load_matrix_dataset(train_path, test_path=None, binarize_threshold: int = 3) -> Dataset:
    """Load a Coat-format rating matrix (plus optional unbiased test matrix).

    Ratings >= threshold become 1, observed ratings below it become 0, and
    raw value 0 means unobserved.  The test grid is binarized identically.
    """
    raw = _read_matrix(Path(train_path))
    observed = raw[raw != 0]
    if observed.size == 0:
        raise FormatError(f"{train_path}: no observed ratings")
    if binarize_threshold < 1 or binarize_threshold > int(observed.max()):
        raise ConfigError(f"binarize threshold {binarize_threshold} outside the "
                          f"rating scale [1, {int(observed.max())}]")
    ratings, mask = _binarize(raw, binarize_threshold)
    test_ratings = test_mask = None
    if test_path is not None:
        raw_test = _read_matrix(Path(test_path))
        if raw_test.shape != raw.shape:
            raise FormatError("train and test grids have different shapes")
        test_ratings, test_mask = _binarize(raw_test, binarize_threshold)
    return Dataset(ratings=ratings, mask=mask,
                   test_ratings=test_ratings, test_mask=test_mask)


def save_matrix_dataset(dataset: Dataset, train_path, test_path=None,
                        propensity_path=None) -> None:
    """Serialize a binarized dataset back to the matrix format.

    Observed outcomes are written as 1 (negative) / 2 (positive); 0 stays
    the unobserved sentinel.  Reload with ``binarize_threshold=2``.
    """
    def encode(ratings, mask):
        return np.where(mask == 1, ratings.astype(np.int64) + 1, 0)

    def write(path, grid, fmt="%d"):
        with open(path, "w") as fh:
            for row in grid:
                fh.write(" ".join(fmt % v for v in row) + "\n")

    write(train_path, encode(dataset.ratings, dataset.mask))
    if test_path is not None:
        if dataset.test_ratings is None:
            raise RequestError("dataset has no test grid to serialize")
        write(test_path, encode(dataset.test_ratings, dataset.test_mask))
    if propensity_path is not None:
        if dataset.true_propensities is None:
            raise RequestError("dataset has no propensity grid to serialize")
        write(propensity_path, dataset.true_propensities, fmt="%.10f")


def generate_synthetic(n_users: int, n_items: int, latent_dim: int,
                       propensity_range: tuple[float, float], seed: int, *,
                       outcome_scale: float = 2.0,
                       outcome_curvature: float = 0.0,
                       propensity_scale: float = 1.5,
                       propensity_main_effects: float = 0.0,
                       propensity_item_effects: float = 0.0,
                       propensity_outcome_boost: float = 0.0,
                       propensity_offset: float = -1.0,
                       propensity_latent_dims: int = 0) -> Dataset:
    """Draw an MNAR dataset from a logistic low-rank model with known propensities.

    Outcomes r ~ Bernoulli(sigmoid(outcome_scale * z)) for a low-rank score
    grid z; observations o ~ Bernoulli(p) with p a (clipped) logistic
    function of the same latents: the interaction score z plus optional
    user/item main effects, so observation correlates with preference.
    The full outcome grid is kept as the unbiased test oracle.  Identical
    seeds give bit-identical datasets.
    """
    lo, hi = propensity_range
    if lo <= 0.0:
        raise ConfigError("propensity lower bound must be positive")
    if lo > hi or hi > 1.0:
        raise ConfigError("propensity range must satisfy 0 < lo <= hi <= 1")
    if n_users < 1 or n_items < 1 or latent_dim < 1:
        raise ConfigError("grid and latent dimensions must be >= 1")

    rng = np.random.default_rng(seed)
    user_latents = rng.normal(size=(n_users, latent_dim))
    item_latents = rng.normal(size=(n_items, latent_dim))
    z = user_latents @ item_latents.T / np.sqrt(latent_dim)

    main = (user_latents.mean(axis=1)[:, None]
            + item_latents.mean(axis=1)[None, :])
    k = propensity_latent_dims
    if k < 0 or k > latent_dim:
        raise ConfigError("propensity_latent_dims must lie in [0, latent_dim]")
    if k and k < latent_dim:
        # Selection driven by a subset of the latent directions makes the
        # observed sample over-represent that structure.
        z_sel = user_latents[:, :k] @ item_latents[:, :k].T / np.sqrt(k)
    else:
        z_sel = z
    # Optional curvature along the selection directions: a bilinear model is
    # then misspecified, and its best fit depends on which region of z_sel
    # the training distribution emphasizes (the regime where reweighting
    # genuinely changes the learned ranking).
    outcome_prob = sigmoid(outcome_scale * z
                           + outcome_curvature * (z_sel ** 2 - 1.0))
    # Item-side exposure bias along the first latent direction: items loved
    # by one user segment get shown to everyone, starving the opposite
    # segment's taste signal.
    item_exposure = item_latents[:, 0][None, :]
    logits = (propensity_scale * z_sel + propensity_main_effects * main
              + propensity_item_effects * item_exposure + propensity_offset)

    outcomes = (rng.random(z.shape) < outcome_prob).astype(np.float64)
    if propensity_outcome_boost:
        # Genuinely non-ignorable missingness: whether a rating is volunteered
        # depends on the realized outcome, with the direction flipped between
        # two item groups (praise-driven vs complaint-driven rating cultures).
        group = np.where(item_latents[:, 1] > 0, 1.0, -1.0)[None, :]
        logits = logits + propensity_outcome_boost * group * (2.0 * outcomes - 1.0)
    propensities = np.clip(sigmoid(logits), lo, hi)

    mask = (rng.random(z.shape) < propensities).astype(np.int8)

    return Dataset(ratings=np.where(mask == 1, outcomes, 0.0),
                   mask=mask,
                   true_propensities=propensities,
                   test_ratings=outcomes.copy(),
                   test_mask=np.ones_like(mask))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build_features(dataset: Dataset, source: FeatureSource,
                   prediction_model=None) -> FeatureMap:
    """Construct pair features.

    ``one_hot_concat`` concatenates user and item indicator vectors
    (dimension n_users + n_items, exactly two nonzeros).  ``embedding_concat``
    concatenates detached copies of the prediction model's current user and
    item embeddings; refresh by calling again after the model has moved.
    """
    source = FeatureSource(source)
    if source is FeatureSource.ONE_HOT_CONCAT:
        return FeatureMap(source=source,
                          user_block=np.eye(dataset.n_users),
                          item_block=np.eye(dataset.n_items))
    if prediction_model is None:
        raise ConfigError("embedding_concat features require a prediction model")
    user_emb = np.array(prediction_model.user_emb, dtype=np.float64, copy=True)
    item_emb = np.array(prediction_model.item_emb, dtype=np.float64, copy=True)
    if user_emb.shape[0] != dataset.n_users or item_emb.shape[0] != dataset.n_items:
        raise ConfigError("prediction model shape does not match dataset")
    return FeatureMap(source=source, user_block=user_emb, item_block=item_emb)


def standardize_features(feature_map: FeatureMap) -> FeatureMap:
    """Z-score each feature column and rescale so E||x - x'||^2 is about 2.

    Raw embedding snapshots grow with training and would push Gaussian or
    exponential kernels into their saturated regimes; standardizing keeps
    the spread of kernel values meaningful for bandwidths of order one.
    One-hot blocks should not be standardized (they already live on the
    unit scale).
    """
    def zscore(block):
        centered = block - block.mean(axis=0)
        scale = np.maximum(block.std(axis=0), 1e-8)
        return centered / scale

    dim = feature_map.dim
    return FeatureMap(source=feature_map.source,
                      user_block=zscore(feature_map.user_block) / np.sqrt(dim),
                      item_block=zscore(feature_map.item_block) / np.sqrt(dim))


def sample_batch(dataset: Dataset, scope: DrawScope, size: int,
                 rng: np.random.Generator) -> Batch:
    """Uniform sample of pairs without replacement; deterministic given rng state."""
    scope = DrawScope(scope)
    if scope is DrawScope.OBSERVED_ONLY:
        users, items = dataset.observed_pairs()
        population = users.size
    else:
        population = dataset.n_pairs
    if size < 1 or size > population:
        raise RequestError(f"batch size {size} outside population {population}")
    idx = rng.choice(population, size=size, replace=False)
    if scope is DrawScope.OBSERVED_ONLY:
        return Batch(users=users[idx].copy(), items=items[idx].copy(), scope=scope)
    return Batch(users=idx // dataset.n_items, items=idx % dataset.n_items, scope=scope)
