"""BPR triple sampling, Adam, and the epoch loop with early stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape
from .config import ModelConfig
from .data import encode_pairs
from .evaluator import evaluate_embeddings
from .graphs import GraphSet
from .model import ModelParams, embed, forward
from .objective import TripleBatch, model_loss

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TripleSampler:
    """Draws ``(u, i, j)`` with ``(u, i)`` uniform over training pairs and ``j`` unobserved."""

    def __init__(self, train_pairs, n_items: int):
        self.pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
        if len(self.pairs) == 0:
            raise ValueError("no training interactions to sample from")
        self.n_items = n_items
        self.observed = np.sort(encode_pairs(self.pairs, n_items))
        self.degree = np.bincount(self.pairs[:, 0])

    def _is_observed(self, users, items) -> np.ndarray:
        codes = users * self.n_items + items
        pos = np.searchsorted(self.observed, codes)
        pos = np.minimum(pos, len(self.observed) - 1)
        return self.observed[pos] == codes

    def sample(self, batch_size: int, rng: np.random.Generator) -> TripleBatch:
        picks = rng.integers(0, len(self.pairs), size=batch_size)
        users, pos = self.pairs[picks, 0], self.pairs[picks, 1]
        full = self.degree[users] >= self.n_items
        if np.any(full):
            raise ValueError(f"user {int(users[full][0])} has interacted with every item; "
                             "no negative exists")
        neg = rng.integers(0, self.n_items, size=batch_size)
        bad = self._is_observed(users, neg)
        while np.any(bad):
            neg[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad = self._is_observed(users, neg)
        return TripleBatch(users, pos, neg)


def sample_triples(train_pairs, n_items: int, batch_size: int, rng) -> TripleBatch:
    return TripleSampler(train_pairs, n_items).sample(batch_size, rng)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        tables = params.tables()
        return cls({k: np.zeros_like(t) for k, t in tables.items()},
                   {k: np.zeros_like(t) for k, t in tables.items()}, 0)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on ``params`` (a ModelParams or dict of arrays)."""
    tables = params.tables() if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in table {name!r}")
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, g in grads.items():
        p = tables[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match table {name!r} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"update produced non-finite values in table {name!r}")
    return params, state


LOSS_KEYS = ("total", "bpr", "scl_u", "scl_i", "reg")


def train_step(params: ModelParams, graphs: GraphSet, config: ModelConfig,
               batch: TripleBatch, state: AdamState) -> dict[str, float]:
    out = forward(params, graphs, config, Tape())
    terms = model_loss(out, batch, config)
    grads = out.tape.backward(terms.total)
    adam_step(params, grads, state, config.lr)
    return terms.values()


def train_epoch(params: ModelParams, graphs: GraphSet, config: ModelConfig,
                sampler: TripleSampler, state: AdamState, rng) -> dict[str, float]:
    """``ceil(n_train / batch_size)`` optimizer steps; returns per-term loss sums."""
    steps = math.ceil(len(sampler.pairs) / config.batch_size)
    sums = dict.fromkeys(LOSS_KEYS, 0.0)
    for _ in range(steps):
        values = train_step(params, graphs, config, sampler.sample(config.batch_size, rng), state)
        for k in LOSS_KEYS:
            sums[k] += values[k]
    return sums


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_recall: float = -1.0
    stop_reason: str = ""

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_val_recall": self.best_val_recall, "stop_reason": self.stop_reason}


def fit(config: ModelConfig, n_users: int, n_items: int, train_pairs, valid_pairs,
        graphs: GraphSet, validate=None, params: ModelParams | None = None):
    """Train with early stopping on validation Recall@``monitor_k``.

    ``validate(params) -> (recall, ndcg)`` overrides the default validation
    pass. Returns ``(report, best_params)``.
    """
    valid_pairs = np.asarray(valid_pairs, dtype=np.int64).reshape(-1, 2)
    if validate is None:
        if len(valid_pairs) == 0:
            raise ValueError("validation split is empty")

        def validate(p):
            fu, fi = embed(p, graphs, config)
            rep = evaluate_embeddings(fu, fi, train_pairs, valid_pairs, config.monitor_k)
            return rep.recall, rep.ndcg

    params = params if params is not None else ModelParams.init(n_users, n_items, config.dim,
                                                                config.seed)
    rng = np.random.default_rng(config.seed)
    sampler = TripleSampler(train_pairs, n_items)
    state = AdamState.for_params(params)
    report = TrainReport(stop_reason="max_epochs")
    best = params.copy()
    wait = 0
    for epoch in range(1, config.epochs + 1):
        losses = train_epoch(params, graphs, config, sampler, state, rng)
        recall, ndcg = validate(params)
        report.epochs.append({"epoch": epoch, **losses, "val_recall": float(recall),
                              "val_ndcg": float(ndcg)})
        log.info("epoch %d loss %.4f val recall@%d %.4f", epoch, losses["total"],
                 config.monitor_k, recall)
        if recall > report.best_val_recall:
            report.best_val_recall = float(recall)
            report.best_epoch = epoch
            best = params.copy()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                report.stop_reason = "early_stop"
                break
    assert all(report.best_val_recall >= e["val_recall"] for e in report.epochs)
    return report, best

