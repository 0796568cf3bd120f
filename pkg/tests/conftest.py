import numpy as np
import pytest

from bayesattack import zoo
from bayesattack.numcore import RngStream


def small_model(kind="mlp", hidden=(5,), input_shape=(6,), classes=3, activation="relu", seed=0):
    arch = zoo.ArchSpec(kind, hidden, input_shape, classes, activation)
    stream = RngStream(seed, "model")
    mean = np.full(arch.channels, 0.4) + 0.1 * stream.uniform((arch.channels,))
    std = 0.5 + 0.5 * stream.uniform((arch.channels,))
    return zoo.init_model(arch, stream.child("init"), mean, std)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


class QuadBilinear:
    """L(w, X) = 1/2 w'Aw + b'w + mean_i x_i'Bw; exact gradients, known curvature."""

    def __init__(self, A, b, B):
        self.A, self.b, self.B = A, b, B

    def loss_grad_w(self, w, x):
        flat = x.reshape(len(x), -1)
        loss = 0.5 * w @ self.A @ w + self.b @ w + np.mean(flat @ self.B @ w)
        return float(loss), self.A @ w + self.b + self.B.T @ flat.mean(axis=0)

    def grad_x(self, w, x):
        return np.broadcast_to(self.B @ w, x.shape).copy()


def quad_bilinear_toy(seed=0, p=6, d=4, n=5, bilinear=True):
    r = RngStream(seed, "toy")
    Q = r.normal((p, p))
    A = Q @ Q.T + np.eye(p)
    B = r.normal((d, p)) if bilinear else np.zeros((d, p))
    return QuadBilinear(A, r.normal((p,)), B), r.normal((p,)), r.uniform((n, d))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
