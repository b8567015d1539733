import numpy as np
import pytest

from clothrl.clothsim import ObsGeometry, SimConfig
from clothrl.config import load_config

# small, fast geometry shared by most tests: 12x12 cloth on a 32x32 grid
TEST_SETS = [
    "sim.rows=12", "sim.cols=12", "sim.spacing=0.025",
    "obs.height=32", "obs.width=32",
    "action.rotations=8", "action.scales=[1.0, 0.5]",
    "action.pixel_displacement=6.0",
    "net.channels=[4, 8]",
]


@pytest.fixture(scope="session")
def run_cfg():
    return load_config(sets=TEST_SETS)


@pytest.fixture(scope="session")
def sim_cfg(run_cfg):
    return SimConfig.from_run(run_cfg)


@pytest.fixture(scope="session")
def geom(run_cfg):
    return ObsGeometry.from_run(run_cfg)


def fd_gradient_error(make_loss, params, rng, h=1e-5, samples=10):
    """Worst-case central finite-difference error over sampled entries.

    Relative error uses max(|fd|, |analytic|, 1e-4) as the denominator
    so structurally-zero gradients compare in absolute terms instead of
    amplifying float roundoff.
    """
    from clothrl import autodiff as ad
    from clothrl.neuralnet import as_vars

    pvars = as_vars(params)
    loss = make_loss(pvars)
    ad.backward(loss)
    worst = 0.0
    for name, p in params.items():
        grad = pvars[name].grad
        if grad is None:
            grad = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = grad.reshape(-1)
        count = min(flat.size, samples)
        for i in rng.choice(flat.size, size=count, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(make_loss(as_vars(params)).data)
            flat[i] = orig - h
            lm = float(make_loss(as_vars(params)).data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-4)
            worst = max(worst, err)
    return worst
