import numpy as np
import pytest


def fd_gradient(model, x, rel_step=1e-5):
    """Central differences of model.predict, step scaled by the input standardization."""
    x = np.atleast_2d(np.asarray(x, float))
    jac = np.abs(model.input_map.jacobian).max(axis=0)
    scale = np.where(jac > 0, 1.0 / np.where(jac > 0, jac, 1.0), 1.0)
    out = np.zeros((len(x), model.d_out, x.shape[1]))
    for j in range(x.shape[1]):
        h = rel_step * scale[j]
        e = np.zeros(x.shape[1])
        e[j] = h
        out[:, :, j] = (model.predict(x + e) - model.predict(x - e)) / (2 * h)
    return out


def gradient_rel_error(model, x):
    g = model.gradient(x)
    fd = fd_gradient(model, x)
    return float(np.max(np.abs(g - fd)) / max(1.0, float(np.max(np.abs(fd)))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
