import numpy as np
import pytest

from roomshift.dataset import build_dataset

MICRO_SEED = 11


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Smallest dataset whose splits can each draw two contents and two rooms."""
    out = tmp_path_factory.mktemp("data") / "micro"
    build_dataset(
        out,
        seed=MICRO_SEED,
        n_rooms=14,
        n_transfer=12,
        n_pairs=16,
        corpus_size=14,
        dry_seconds=6.0,
    )
    return str(out)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
