"""Shared fixtures and reference (oracle) implementations.

The reference model below recomputes the forward pass sample by sample with
scipy primitives, independently of the package kernels, so the two can only
agree if both are correct.
"""

import numpy as np
import pytest
from scipy.special import expit

from fedkei.model import Model, ModelConfig, TaskBatch, TaskModule


@pytest.fixture(scope="session")
def model():
    return Model(ModelConfig())


def reference_loss(inputs, labels, P, adapter, head):
    """Per-sample loop re-implementation of the task loss."""
    n_in = P.shape[0]
    r = adapter.size // (2 * n_in)
    U = adapter[: n_in * r].reshape(n_in, r)
    V = adapter[n_in * r:].reshape(r, n_in)
    w, b = head[:-1], head[-1]
    total = 0.0
    for x, y in zip(inputs, labels):
        z = x + (x @ U) @ V
        h = np.tanh(z @ P)
        s = h @ w + b
        # -log p(y | s) in a numerically safe form
        total += np.logaddexp(0.0, s) - y * s
    return total / len(labels)


def reference_scores(inputs, P, adapter, head):
    n_in = P.shape[0]
    r = adapter.size // (2 * n_in)
    U = adapter[: n_in * r].reshape(n_in, r)
    V = adapter[n_in * r:].reshape(r, n_in)
    w, b = head[:-1], head[-1]
    return expit((np.tanh((inputs + (inputs @ U) @ V) @ P)) @ w + b)


def random_module(model: Model, rng, scale=0.5) -> TaskModule:
    c = model.config
    return TaskModule(adapter=scale * rng.standard_normal(c.adapter_dim),
                      head=scale * rng.standard_normal(c.head_dim))


def random_batch(model: Model, rng, n=12) -> TaskBatch:
    return TaskBatch(rng.standard_normal((n, model.config.input_dim)),
                     rng.integers(0, 2, n).astype(float))
