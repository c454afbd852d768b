import numpy as np
import pytest
import torch

from patchadv.generator import PerturbationGenerator
from patchadv.surrogate import FeatureMapSet
from patchadv.toy import make_toy_dataset, train_toy_surrogate

torch.set_num_threads(1)

# Criterion results recorded by tests/test_acceptance.py, echoed after the run.
ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")


def random_feature_sets(rng, num_layers=None, batch=1, dtype=torch.float64):
    """A (clean, perturbed) pair of random small FeatureMapSets."""
    num_layers = num_layers or int(rng.integers(1, 4))
    clean, pert = [], []
    for _ in range(num_layers):
        h = int(rng.integers(2, 5))
        w = int(rng.integers(2, 5))
        c = int(rng.integers(1, 9))
        shape = (batch, h, w, c)
        clean.append(torch.tensor(rng.normal(size=shape), dtype=dtype))
        pert.append(torch.tensor(rng.normal(size=shape), dtype=dtype))
    return FeatureMapSet(maps=clean), FeatureMapSet(maps=pert)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small toy split for cheap plumbing tests: (train, test) manifests."""
    root = tmp_path_factory.mktemp("tiny_data")
    return make_toy_dataset(root, n_train=12, n_test=6, seed=3)


@pytest.fixture(scope="session")
def tiny_surrogate(tiny_data):
    """Weak but functional classifier handle (plumbing tests, not accuracy)."""
    train_m, _ = tiny_data
    return train_toy_surrogate(train_m, epochs=2, batch_size=6, seed=1,
                               widths=(8, 16, 16, 32))


@pytest.fixture()
def tiny_generator(tiny_surrogate):
    torch.manual_seed(0)
    return PerturbationGenerator(width=4, residual_blocks=1,
                                 mean=tiny_surrogate.mean, std=tiny_surrogate.std)
