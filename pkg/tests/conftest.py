import numpy as np
import pytest

from itmn import tensor as T
from itmn.hdrio import HdrImage, write_rgbe


@pytest.fixture(autouse=True)
def finite_guard():
    """Every tensor built during tests is scanned for NaN/Inf."""
    old = T.CHECK_FINITE
    T.CHECK_FINITE = True
    yield
    T.CHECK_FINITE = old


def smooth_pair(seed: int, hw: int = 32):
    """A synthetic (ldr, hdr) pair in [0,1], smooth enough to learn."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:hw, 0:hw] / (hw - 1)
    a, b, c = rng.uniform(0.2, 0.8, 3)
    ldr = np.clip(np.stack([a * xx + 0.1, b * yy + 0.1,
                            c * (xx + yy) / 2 + 0.1], axis=-1), 0, 1)
    hdr = np.clip(np.stack([ldr[..., 0] ** 1.5, ldr[..., 1] ** 2.0,
                            0.9 * ldr[..., 2]], axis=-1), 0, 1)
    return ldr.astype(np.float32), hdr.astype(np.float32)


def synthetic_hdr(seed: int, hw: int = 160) -> HdrImage:
    """Linear-light scene with a bright bump, peak around 1500 nits."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:hw, 0:hw] / (hw - 1)
    base = np.stack([
        200 + 800 * xx * rng.uniform(0.5, 1.5),
        150 + 600 * yy * rng.uniform(0.5, 1.5),
        100 + 400 * (xx + yy) / 2 * rng.uniform(0.5, 1.5)], axis=-1)
    bump = 900 * np.exp(-(((xx - rng.uniform(0.3, 0.7)) ** 2
                           + (yy - rng.uniform(0.3, 0.7)) ** 2) / 0.02))
    pix = np.clip(base + bump[..., None], 0, None).astype(np.float32)
    return HdrImage(hw, hw, pix)


@pytest.fixture
def hdr_corpus(tmp_path):
    """Three synthetic .hdr files on disk; returns the directory."""
    src = tmp_path / "hdr_src"
    src.mkdir()
    for i in range(3):
        write_rgbe(synthetic_hdr(50 + i), src / f"scene{i}.hdr")
    return src
