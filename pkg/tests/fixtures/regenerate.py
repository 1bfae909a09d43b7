"""Rewrite the regression fixtures. Run only after a change has been verified
against the independent oracles in the test suite."""

from pathlib import Path

import numpy as np

from htrkd import layers as L
from htrkd.model import TEACHER, forward, init_params
from htrkd.numerics import Tensor
from tests.test_layers import block_params

HERE = Path(__file__).parent


def cnn_block_golden() -> np.ndarray:
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 1, 4, 8))
    return L.cnn_block(Tensor(x), block_params(rng, 1, 4, pool=(2, 1)), training=False).data


def teacher_golden() -> np.ndarray:
    cfg = TEACHER.with_(dtype="float64")
    img = np.random.default_rng(11).uniform(-1, 1, (1, cfg.height, cfg.width))
    return forward(cfg, init_params(cfg, seed=3), img).logits.data


if __name__ == "__main__":
    np.save(HERE / "cnn_block_golden.npy", cnn_block_golden())
    np.savez_compressed(HERE / "teacher_golden.npz", logits=teacher_golden())
