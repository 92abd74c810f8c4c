import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from repsnet.groundtruth import SynthSpec, synth_sample  # noqa: E402
from repsnet.network import RepSNet, RepSNetConfig  # noqa: E402
from repsnet.train import Sample, fit, train_step, make_batch, TrainState  # noqa: E402

# desk-scale benchmark: 200 images split 7:1:2, default network, fixed seeds
DESK_IMAGES = 200
DESK_EPOCHS = 12
DESK_LR = 2e-3
DESK_DATA_SEED = 1000

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one pass/fail line for the acceptance summary."""
    def _report(label, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed
    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance_map(rng, h=16, w=16, max_inst=4):
    """Rectangles and ellipses painted in sequence (later ones occlude)."""
    inst = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    for k in range(1, int(rng.integers(0, max_inst + 1)) + 1):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(1, max(h / 3, 1)), rng.uniform(1, max(w / 3, 1))
        if rng.random() < 0.5:
            m = (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)
        else:
            m = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1
        inst[m] = k
    return inst


def tiny_config(**kw):
    return RepSNetConfig(num_blocks=3, units_per_block=[1, 2, 1], base_width=4, **kw)


def tiny_samples(count=4, seed=0, size=32):
    spec = SynthSpec(height=size, width=size, count_range=(2, 4), radius_range=(3.0, 5.0))
    return [Sample(*synth_sample(seed + i, spec), name=f"s{i}") for i in range(count)]


@pytest.fixture(scope="session")
def tiny_trained_net():
    """Small network after a few Adam steps, so running BN stats are populated."""
    net = RepSNet.create(tiny_config(), seed=3)
    x, targets = make_batch(tiny_samples(), 5)
    state = TrainState(lr=1e-3)
    for _ in range(5):
        train_step(net, x, targets, state, *_default_loss())
    return net


def _default_loss():
    from repsnet.losses import IsoheightConfig, LossWeights
    return LossWeights(), IsoheightConfig()


def desk_dataset():
    data = [Sample(*synth_sample(DESK_DATA_SEED + i), name=f"img{i:05d}") for i in range(DESK_IMAGES)]
    return data[:140], data[140:160], data[160:]


def train_desk(config=None, nb_weight=1.0, seed=0):
    from repsnet.losses import LossWeights

    train_set, val_set, test_set = desk_dataset()
    net = RepSNet.create(config or RepSNetConfig(), seed=seed)
    t0, c0 = time.perf_counter(), time.process_time()
    best, history = fit(net, train_set, val_set, DESK_EPOCHS, lr=DESK_LR, seed=seed,
                        weights=LossWeights(nb=nb_weight))
    return {"net": best, "history": history, "test": test_set,
            "wall": time.perf_counter() - t0, "cpu": time.process_time() - c0}


@pytest.fixture(scope="session")
def desk_run():
    """The default configuration trained on the desk-scale benchmark (minutes)."""
    return train_desk()


def perfect_outputs(inst, types):
    """Network outputs that reproduce the ground truth exactly."""
    from repsnet.groundtruth import NUM_CLASSES, bd_from_instances
    fg = inst > 0
    np_logits = np.stack([~fg, fg]).astype(np.float64)
    nt_logits = (np.arange(NUM_CLASSES)[:, None, None] == types[None]).astype(np.float64)
    return np_logits, nt_logits, bd_from_instances(inst).astype(np.float64)
