"""Minibatch training for the graph model.

Seeds fan out from one master seed by stream id: each consumer draws from
``np.random.default_rng([seed, STREAM])`` so changing, say, the batch order
never perturbs the weight initialisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dgcnn
from .errors import DataError
from .graph import select_k
from .metrics import evaluate_scores

logger = logging.getLogger(__name__)

STREAM_SPLIT = 0
STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_ORDER = 3
STREAM_FOLDS = 4


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)


def resolve_k(graphs, cfg: dgcnn.DgcnnConfig) -> int:
    return cfg.k if cfg.k is not None else select_k(graphs, cfg.pooling_rate)


def fit(graphs, cfg: dgcnn.DgcnnConfig, settings: TrainSettings = TrainSettings(),
        val_graphs=None, k: int | None = None, callback=None):
    """Train from scratch; returns (params, History).

    ``k`` defaults to the config's explicit k or the pooling-rate choice
    over ``graphs``. ``callback(epoch, params, history)`` runs after every
    epoch.
    """
    graphs = list(graphs)
    if not graphs:
        raise DataError("training set is empty")
    if k is None:
        k = resolve_k(graphs, cfg)
    labels = np.array([g.label for g in graphs], dtype=np.int64)
    params = dgcnn.init_params(cfg, k, stream_rng(settings.seed, STREAM_INIT))
    state = dgcnn.AdamState(settings.lr, settings.beta1, settings.beta2, settings.eps)
    drop_rng = stream_rng(settings.seed, STREAM_DROPOUT)
    order_rng = stream_rng(settings.seed, STREAM_ORDER)
    history = History()
    for epoch in range(settings.epochs):
        order = order_rng.permutation(len(graphs))
        total, seen = 0.0, 0
        for start in range(0, len(order), settings.batch_size):
            idx = order[start:start + settings.batch_size]
            masks = dgcnn.dropout_masks(drop_rng, len(idx), cfg.mlp_hidden, cfg.dropout)
            batch_loss, grads = dgcnn.loss_and_grads([graphs[i] for i in idx], labels[idx], params, cfg, masks)
            dgcnn.adam_step(params.arrays(), grads.arrays(), state)
            total += batch_loss * len(idx)
            seen += len(idx)
        history.train_loss.append(total / seen)
        if val_graphs:
            rep = evaluate_graphs(val_graphs, params, cfg, "validation")
            history.val_f1.append(rep.f1)
            history.val_auc.append(rep.auc)
        logger.info("epoch %d/%d loss %.5f%s", epoch + 1, settings.epochs, history.train_loss[-1],
                    f" val f1 {history.val_f1[-1]:.4f}" if val_graphs else "")
        if callback is not None:
            callback(epoch, params, history)
    return params, history


def malicious_scores(graphs, params, cfg) -> np.ndarray:
    return dgcnn.predict_proba(graphs, params, cfg)[:, 1]


def evaluate_graphs(graphs, params, cfg, dataset=""):
    graphs = list(graphs)
    if not graphs:
        raise DataError(f"dataset {dataset!r} is empty")
    scores = malicious_scores(graphs, params, cfg)
    return evaluate_scores(scores, [g.label for g in graphs], dataset)
