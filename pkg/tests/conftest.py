import numpy as np
import pytest

from u2airway.phantom import PhantomConfig, gen_phantom
from u2airway.preprocess import Volume, make_inputs, normalize_volume
from u2airway.train import TrainConfig, train
from u2airway.u2net import U2NetSpec

OVERFIT_SLICES = (6, 14, 20, 26)


def overfit_case():
    """Four axial slices of the default phantom, as a (Volume, mask) pair."""
    ph = gen_phantom(PhantomConfig(), seed=0)
    zs = list(OVERFIT_SLICES)
    vol = Volume(ph.volume.values[zs], ph.volume.spacing)
    mask = ph.mask.values[zs]
    return vol, mask


def overfit_dataset(vol, mask):
    stack = make_inputs(normalize_volume(vol))
    return [(stack.slices[k], mask[k].astype(np.float32)) for k in range(len(stack))]


def run_overfit(steps=200, seed=0):
    """Toy spec, Adam lr 1e-3, batch 2, ``steps`` steps on the four slices."""
    vol, mask = overfit_case()
    cfg = TrainConfig(optimizer="adam", lr=1e-3, batch_size=2, epochs=10_000, max_steps=steps, seed=seed)
    ckpt, curve = train(cfg, U2NetSpec.toy(), overfit_dataset(vol, mask))
    return ckpt, curve, vol, mask


@pytest.fixture(scope="session")
def overfit_run():
    return run_overfit()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run

ACCEPTANCE = {}


def record(n, ok, detail):
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
