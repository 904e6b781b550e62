import pytest

from balign.synthdata import DatasetConfig, gen_dataset

TINY_DATA = DatasetConfig(identities=6, train_per_id=3, test_per_id=2,
                          landmark_count=8, image_size=16, seed=11)


@pytest.fixture(scope="session")
def default_dataset_dir(tmp_path_factory):
    """The default synthetic dataset, generated once per test session."""
    root = tmp_path_factory.mktemp("default-dataset")
    gen_dataset(DatasetConfig(), str(root))
    return root


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A miniature dataset for fast end-to-end training tests."""
    root = tmp_path_factory.mktemp("tiny-dataset")
    gen_dataset(TINY_DATA, str(root))
    return str(root)
