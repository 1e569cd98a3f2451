"""Desk-scale stand-in for a frozen foundation model with a tunable adapter
and head.

The backbone is a fixed random projection followed by tanh. The adapter is an
additive low-rank linear map applied to the input (x -> x + x @ U @ V, with
the two factor blocks flattened into one adapter vector). The head is a
linear logit, and the loss is mean binary cross-entropy. Gradients are exact
and hand-derived; the hot paths live in :mod:`fedkei.kernels`.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DivergenceError, InputError
from .metrics import auc
from .paramspace import as_vector


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    feature_dim: int = 32
    adapter_rank: int = 2
    backbone_seed: int = 0

    @property
    def adapter_dim(self) -> int:
        return 2 * self.input_dim * self.adapter_rank

    @property
    def head_dim(self) -> int:
        return self.feature_dim + 1

    @property
    def module_dim(self) -> int:
        return self.adapter_dim + self.head_dim


class Backbone:
    """Frozen feature extractor: tanh(x @ P). Identical seed, identical P."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.backbone_seed))
        P = rng.standard_normal((config.input_dim, config.feature_dim))
        P /= np.sqrt(config.input_dim)
        P.flags.writeable = False
        self.projection = P

    def __eq__(self, other):
        return (isinstance(other, Backbone)
                and self.config == other.config
                and np.array_equal(self.projection, other.projection))


@dataclass(frozen=True)
class TaskModule:
    """One task-specific module: adapter part (omega) and head part (phi)."""

    adapter: np.ndarray
    head: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "adapter", as_vector(self.adapter))
        object.__setattr__(self, "head", as_vector(self.head))

    @property
    def parts(self) -> dict:
        return {"adapter": self.adapter, "head": self.head}


PARTS = ("adapter", "head")


@dataclass
class TaskBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise InputError("batch inputs must be a nonempty 2-D array")
        if self.labels.shape != (self.inputs.shape[0],):
            raise InputError("labels and inputs lengths differ")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise InputError("labels must be binary")

    def __len__(self):
        return self.inputs.shape[0]


class Model:
    """Frozen backbone + module operations. Pure given (inputs, seed)."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.backbone = Backbone(self.config)

    def _unpack(self, m: TaskModule):
        c = self.config
        nr = c.input_dim * c.adapter_rank
        if m.adapter.size != c.adapter_dim:
            raise InputError(
                f"adapter dim {m.adapter.size} != expected {c.adapter_dim}")
        if m.head.size != c.head_dim:
            raise InputError(f"head dim {m.head.size} != expected {c.head_dim}")
        U = np.ascontiguousarray(m.adapter[:nr].reshape(c.input_dim, c.adapter_rank))
        V = np.ascontiguousarray(m.adapter[nr:].reshape(c.adapter_rank, c.input_dim))
        w = np.ascontiguousarray(m.head[:-1])
        b = float(m.head[-1])
        return U, V, w, b

    def pack(self, U, V, w, b) -> TaskModule:
        return TaskModule(
            adapter=np.concatenate([np.ravel(U), np.ravel(V)]),
            head=np.concatenate([np.ravel(w), [b]]),
        )

    def module_from_parts(self, parts: dict) -> TaskModule:
        return TaskModule(adapter=parts["adapter"], head=parts["head"])

    def _check_batch(self, batch: TaskBatch):
        if batch.inputs.shape[1] != self.config.input_dim:
            raise InputError(
                f"input dim {batch.inputs.shape[1]} != expected {self.config.input_dim}")

    def forward_loss(self, m: TaskModule, batch: TaskBatch) -> float:
        self._check_batch(batch)
        U, V, w, b = self._unpack(m)
        return float(kernels.forward_loss(
            batch.inputs, batch.labels, self.backbone.projection, U, V, w, b))

    def grad_module(self, m: TaskModule, batch: TaskBatch) -> TaskModule:
        """Exact gradient of forward_loss w.r.t. (adapter, head), same shapes."""
        return self.loss_and_grad(m, batch)[1]

    def loss_and_grad(self, m: TaskModule, batch: TaskBatch):
        self._check_batch(batch)
        U, V, w, b = self._unpack(m)
        loss, dU, dV, dw, db = kernels.forward_backward(
            batch.inputs, batch.labels, self.backbone.projection, U, V, w, b)
        for block in (dU, dV, dw):
            if not np.all(np.isfinite(block)):
                raise DivergenceError("non-finite gradient (parameters overflowed)")
        return float(loss), self.pack(dU, dV, dw, db)

    def predict_scores(self, m: TaskModule, inputs) -> np.ndarray:
        inputs = np.ascontiguousarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] == 0:
            raise InputError("inputs must be a nonempty 2-D array")
        if inputs.shape[1] != self.config.input_dim:
            raise InputError(
                f"input dim {inputs.shape[1]} != expected {self.config.input_dim}")
        U, V, w, b = self._unpack(m)
        s = kernels.logits(inputs, self.backbone.projection, U, V, w, b)
        return 1.0 / (1.0 + np.exp(-np.clip(s, -500, 500)))

    def rand_module(self, seed: int, scale: float = 0.1) -> TaskModule:
        """Fresh random module (the Rand baseline initialization)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        c = self.config
        return TaskModule(
            adapter=scale * rng.standard_normal(c.adapter_dim),
            head=scale * rng.standard_normal(c.head_dim),
        )

    def local_finetune(self, init: TaskModule, train: TaskBatch,
                       eval_batch: TaskBatch, epochs: int, lr: float,
                       batch_size: int, seed: int):
        """Mini-batch gradient descent from ``init``.

        Returns the final module and the per-epoch evaluation AUC trace
        (epoch-end AUC on ``eval_batch``) that feeds the LCA metric.
        """
        if epochs < 1:
            raise InputError("epochs must be >= 1")
        if lr < 0:
            raise InputError("lr must be >= 0")
        if len(train) == 0:
            raise InputError("empty train split")
        self._check_batch(train)

        rng = np.random.Generator(np.random.PCG64(seed))
        adapter = init.adapter.copy()
        head = init.head.copy()
        n = len(train)
        trace = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                sub = TaskBatch(train.inputs[idx], train.labels[idx])
                g = self.grad_module(TaskModule(adapter, head), sub)
                adapter = adapter - lr * g.adapter
                head = head - lr * g.head
            scores = self.predict_scores(TaskModule(adapter, head),
                                         eval_batch.inputs)
            trace.append(auc(scores, eval_batch.labels))
        return TaskModule(adapter, head), trace
