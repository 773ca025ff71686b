import numpy as np
import pytest

from kbal import data


def coat_like_dataset(seed, n_users=290, n_items=300,
                      test_items_per_user=16):
    """A Coat-scale MNAR instance: biased training observations (rating
    volunteered more often when the outcome agrees with the item group's
    rating culture) plus a small unbiased per-user test sample drawn from
    the ground truth."""
    full = data.generate_synthetic(n_users, n_items, 8, (0.05, 0.9), seed,
                                   outcome_scale=4.0,
                                   propensity_scale=0.5,
                                   propensity_outcome_boost=1.5,
                                   propensity_offset=-1.0)
    rng = np.random.default_rng([seed, 99])
    test_mask = np.zeros((n_users, n_items), dtype=np.int8)
    for user in range(n_users):
        test_mask[user, rng.choice(n_items, size=test_items_per_user,
                                   replace=False)] = 1
    return data.Dataset(ratings=full.ratings.copy(),
                        mask=full.mask.copy(),
                        true_propensities=full.true_propensities.copy(),
                        test_ratings=np.where(test_mask == 1,
                                              full.test_ratings, 0.0),
                        test_mask=test_mask)


def write_dataset_files(dataset, directory):
    train = directory / "train.txt"
    test = directory / "test.txt"
    data.save_matrix_dataset(dataset, train, test)
    return train, test


@pytest.fixture(scope="session")
def small_dataset_files(tmp_path_factory):
    """Quick MNAR dataset files in the Coat matrix format for CLI tests."""
    directory = tmp_path_factory.mktemp("smalldata")
    dataset = coat_like_dataset(seed=11, n_users=60, n_items=80,
                                test_items_per_user=10)
    return write_dataset_files(dataset, directory)
