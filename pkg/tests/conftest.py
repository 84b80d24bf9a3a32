import numpy as np
import pytest

from gtaseg import trainer
from gtaseg.numkernel import GradTape, tensor_sum

EPS = 1e-3
MAX_REL_ERR = 1e-2


def gradcheck(fn, inputs, rng, n_coords=24):
    """Central-difference check of a tape gradient.

    ``fn(tensors) -> scalar Tensor``; ``inputs`` maps names to float32 arrays.
    Returns the max relative error over sampled coordinates of every input,
    measured against the largest gradient magnitude of that input.
    """
    inputs = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in inputs.items()}
    tape = GradTape()
    watched = {k: tape.watch(k, v) for k, v in inputs.items()}
    grads = tape.backward(fn(watched))
    worst = 0.0
    for name, x in inputs.items():
        flat = x.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + np.float32(EPS)
            up = fn(inputs).item()
            flat[i] = orig - np.float32(EPS)
            down = fn(inputs).item()
            flat[i] = orig
            num[j] = (up - down) / (2 * EPS)
        ana = grads[name].reshape(-1)[idx].astype(np.float64)
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-6)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst


def projected(op, coef):
    """Scalarise ``op`` by a fixed random projection."""
    return lambda t: tensor_sum(op(t), coef)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """A fast task for trainer and CLI tests."""
    return trainer.TrainConfig(method="gta", epochs=1, warmup_epochs=1, n_labeled=4, n_unlabeled=16,
                               n_heldout=4, batch_l=2, batch_u=8, image_size=12, hidden=(4, 4))


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    return trainer.make_dataset(tiny_config)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
