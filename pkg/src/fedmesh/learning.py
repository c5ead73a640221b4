"""Trainable model payloads.

The protocol only ever sees flat float64 weight vectors, so any model that
can export and import its parameters that way can be plugged in. The
reference payload is a multinomial logistic regression trained with
mini-batch SGD.
"""
from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np


class TrainableModel(ABC):
    @abstractmethod
    def get_weights(self) -> np.ndarray: ...

    @abstractmethod
    def set_weights(self, weights: np.ndarray) -> None: ...

    @abstractmethod
    def train_epoch(self, X: np.ndarray, y: np.ndarray, lr: float, batch_size: int,
                    rng: np.random.Generator) -> None: ...

    @abstractmethod
    def evaluate(self, X: np.ndarray, y: np.ndarray) -> float: ...


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LinearClassifier(TrainableModel):
    """Softmax regression. Flattened layout is W (classes x features, row-major) then b."""

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = n_features
        self.n_classes = n_classes
        self.W = np.zeros((n_classes, n_features))
        self.b = np.zeros(n_classes)

    @property
    def dim(self) -> int:
        return self.n_classes * self.n_features + self.n_classes

    def get_weights(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    def set_weights(self, weights) -> None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} weights, got shape {w.shape}")
        k = self.n_classes * self.n_features
        self.W = w[:k].reshape(self.n_classes, self.n_features).copy()
        self.b = w[k:].copy()

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(X @ self.W.T + self.b)

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray):
        """Mean cross-entropy over the batch and its gradient as a flat vector."""
        n = X.shape[0]
        p = self.predict_proba(X)
        loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))
        g = p
        g[np.arange(n), y] -= 1.0
        g /= n
        gW = g.T @ X
        gb = g.sum(axis=0)
        return float(loss), np.concatenate([gW.ravel(), gb])

    def train_epoch(self, X, y, lr, batch_size, rng) -> None:
        n = X.shape[0]
        if n == 0:
            return
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        order = rng.permutation(n)
        k = self.n_classes * self.n_features
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grad = self.loss_and_grad(X[idx], y[idx])
            self.W -= lr * grad[:k].reshape(self.W.shape)
            self.b -= lr * grad[k:]

    def evaluate(self, X, y) -> float:
        if X.shape[0] == 0:
            raise ValueError("empty test set")
        # argmax picks the lowest index on ties
        pred = np.argmax(X @ self.W.T + self.b, axis=1)
        return float(np.mean(pred == y))


def train_local(model: TrainableModel, weights: np.ndarray, X: np.ndarray, y: np.ndarray,
                epochs: int, lr: float, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Load ``weights``, run ``epochs`` local passes and return the new weights."""
    model.set_weights(weights)
    for _ in range(epochs):
        model.train_epoch(X, y, lr, batch_size, rng)
    out = model.get_weights()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("training produced non-finite weights")
    return out
