"""Flat-concatenation baselines: logistic regression, k-NN and an MLP.

All three consume the same per-group encodings the graph builder uses,
laid end to end, so a comparison with the graph model isolates structure
from featurisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dgcnn
from .errors import DataError
from .graph import MAJOR_NODES, NodeEncoderConfig, encode_group
from .training import STREAM_DROPOUT, STREAM_INIT, STREAM_ORDER, stream_rng

FLAT_WIDTH = len(MAJOR_NODES) * 256


def concat_features(record, cfg: NodeEncoderConfig = NodeEncoderConfig()) -> np.ndarray:
    """G|H|I|E|Sec|BH|BEH|Str|D blocks, 256 wide each (no type one-hot)."""
    return np.concatenate([encode_group(t, record, cfg) for t in MAJOR_NODES])


def flat_dataset(records, cfg: NodeEncoderConfig = NodeEncoderConfig()):
    records = list(records)
    if not records:
        return np.zeros((0, FLAT_WIDTH)), np.zeros(0, dtype=np.int64)
    x = np.vstack([concat_features(r, cfg) for r in records])
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, y


def _check_both_classes(y):
    y = np.asarray(y)
    if not (np.any(y == 0) and np.any(y == 1)):
        raise DataError("training set must contain both classes")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LogisticModel:
    w: np.ndarray
    b: float

    def predict_proba(self, x):
        return _sigmoid(np.atleast_2d(x) @ self.w + self.b)


def train_logreg(x, y, lr: float = 0.1, epochs: int = 50, seed: int = 0,
                 batch_size: int = 64, l2: float = 0.0) -> LogisticModel:
    """Minibatch gradient descent on the log loss, from zero weights."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_both_classes(y)
    w = np.zeros(x.shape[1])
    b = 0.0
    rng = stream_rng(seed, STREAM_ORDER)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            err = _sigmoid(x[idx] @ w + b) - y[idx]
            w -= lr * (x[idx].T @ err / len(idx) + l2 * w)
            b -= lr * float(err.mean())
    return LogisticModel(w, b)


def knn_predict(train_x, train_y, query, k_nn: int = 5):
    """Label and positive-neighbour fraction for one query.

    Neighbours are the ``k_nn`` nearest by Euclidean distance (equal
    distances resolved by training index). An exact 50/50 vote takes the
    nearest neighbour's label.
    """
    labels, scores = knn_predict_batch(train_x, train_y, np.atleast_2d(query), k_nn)
    return int(labels[0]), float(scores[0])


def knn_predict_batch(train_x, train_y, queries, k_nn: int = 5, chunk: int = 512):
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0:
        raise DataError("k-NN needs a non-empty training set")
    k_nn = min(k_nn, len(train_x))
    sq_train = np.sum(train_x ** 2, axis=1)
    labels, scores = [], []
    for start in range(0, len(queries), chunk):
        q = np.asarray(queries[start:start + chunk], dtype=np.float64)
        d2 = np.maximum(np.sum(q ** 2, axis=1)[:, None] + sq_train[None, :] - 2.0 * q @ train_x.T, 0.0)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k_nn]
        votes = train_y[nearest]
        frac = votes.mean(axis=1)
        lbl = (frac > 0.5).astype(np.int64)
        tie = frac == 0.5
        lbl[tie] = votes[tie, 0]
        labels.append(lbl)
        scores.append(frac)
    return np.concatenate(labels), np.concatenate(scores)


@dataclass
class FlatMlp:
    weights: list
    biases: list

    def predict_proba(self, x):
        return dgcnn.mlp_forward(np.atleast_2d(x), self.weights, self.biases)


def train_flat_mlp(x, y, hidden=(1024, 1024), dropout: float = 0.5, epochs: int = 20,
                   batch_size: int = 64, lr: float = 1e-3, seed: int = 0, init: str = "glorot") -> FlatMlp:
    """The graph model's classifier head trained directly on flat vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if epochs > 0:
        _check_both_classes(y)
    sizes = (x.shape[1],) + tuple(hidden) + (2,)
    weights, biases = dgcnn.init_mlp(sizes, stream_rng(seed, STREAM_INIT), init)
    state = dgcnn.AdamState(lr=lr)
    drop_rng = stream_rng(seed, STREAM_DROPOUT)
    order_rng = stream_rng(seed, STREAM_ORDER)
    for _ in range(epochs):
        order = order_rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            masks = dgcnn.dropout_masks(drop_rng, len(idx), hidden, dropout)
            probs, tr = dgcnn.mlp_forward(x[idx], weights, biases, masks, "train" if masks else "infer", trace=True)
            gw = [np.zeros_like(w) for w in weights]
            gb = [np.zeros_like(b) for b in biases]
            dgcnn.mlp_backward(tr, dgcnn.loss_logit_grad(probs, y[idx]), weights, gw, gb)
            dgcnn.adam_step(weights + biases, gw + gb, state)
    return FlatMlp(weights, biases)
