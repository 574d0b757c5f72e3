"""Forward computation: hypergraph channels, LightGCN backbone, fusion, scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Node, Tape
from .config import ModelConfig
from .graphs import GraphSet
from .linalg import ShapeError, xavier_init

TABLE_NAMES = ("user_emb", "item_emb", "user_hyper", "item_hyper")


@dataclass
class ModelParams:
    """The four trainable tables: backbone ids and hypergraph-channel inputs."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    user_hyper: np.ndarray
    item_hyper: np.ndarray

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int, seed: int) -> "ModelParams":
        seeds = np.random.SeedSequence(seed).spawn(len(TABLE_NAMES))
        return cls(
            user_emb=xavier_init(n_users, dim, seeds[0]),
            item_emb=xavier_init(n_items, dim, seeds[1]),
            user_hyper=xavier_init(n_users, dim, seeds[2]),
            item_hyper=xavier_init(n_items, dim, seeds[3]),
        )

    def tables(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TABLE_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tables().items()})

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]


@dataclass
class ForwardOutputs:
    h_u: Node
    h_i: Node
    e_u: Node
    e_i: Node
    fused_u: Node
    fused_i: Node
    leaves: dict[str, Node]
    tape: Tape


def propagate_hypergraph(tape: Tape, op, h0: Node, layers: int) -> Node:
    """``layers`` linear applications of ``op``; the last layer is the readout."""
    if layers < 0:
        raise ValueError("layers must be >= 0")
    h = h0
    for _ in range(layers):
        h = tape.apply_operator(op, h)
    return h


def propagate_backbone(tape: Tape, adj, e_u: Node, e_i: Node, layers: int) -> tuple[Node, Node]:
    """LightGCN: propagate the stacked table and average layers ``0..layers``."""
    if layers < 0:
        raise ValueError("layers must be >= 0")
    n_users = e_u.shape[0]
    if layers == 0:
        return e_u, e_i
    x = tape.concat_rows(e_u, e_i)
    outs = [x]
    for _ in range(layers):
        x = tape.apply_operator(adj, x)
        outs.append(x)
    mean = tape.row_mean(*outs)
    n = mean.shape[0]
    return (tape.gather_rows(mean, np.arange(n_users)),
            tape.gather_rows(mean, np.arange(n_users, n)))


def fuse(tape: Tape, e: Node, h: Node) -> Node:
    """``e + h / |h|`` row-wise; zero rows of ``h`` add nothing."""
    if e.shape != h.shape:
        raise ShapeError(f"fuse: {e.shape} vs {h.shape}")
    return tape.add(e, tape.row_l2_normalize(h))


def score_pairs(fused_u, fused_i, users, items) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= len(fused_u)):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= len(fused_i)):
        raise IndexError("item index out of range")
    return np.einsum("ij,ij->i", fused_u[users], fused_i[items])


def forward(params: ModelParams, graphs: GraphSet, config: ModelConfig,
            tape: Tape | None = None) -> ForwardOutputs:
    if params.n_users != graphs.n_users or params.n_items != graphs.n_items:
        raise ShapeError(
            f"params cover {params.n_users}x{params.n_items}, "
            f"graphs {graphs.n_users}x{graphs.n_items}")
    tape = tape if tape is not None else Tape()
    leaves = {name: tape.leaf(name, value) for name, value in params.tables().items()}

    if config.use_u2u:
        h_u = propagate_hypergraph(tape, graphs.u2u, leaves["user_hyper"], config.u2u_layers)
    else:
        h_u = tape.constant(np.zeros_like(params.user_hyper))
    if config.use_i2i:
        h_i = propagate_hypergraph(tape, graphs.i2i, leaves["item_hyper"], config.i2i_layers)
    else:
        h_i = tape.constant(np.zeros_like(params.item_hyper))

    e_u, e_i = propagate_backbone(tape, graphs.backbone, leaves["user_emb"], leaves["item_emb"],
                                  config.backbone_layers)
    fused_u = fuse(tape, e_u, h_u) if config.use_u2u else e_u
    fused_i = fuse(tape, e_i, h_i) if config.use_i2i else e_i
    return ForwardOutputs(h_u, h_i, e_u, e_i, fused_u, fused_i, leaves, tape)


def embed(params: ModelParams, graphs: GraphSet, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Final user and item embeddings as plain arrays."""
    out = forward(params, graphs, config)
    return out.fused_u.value, out.fused_i.value
