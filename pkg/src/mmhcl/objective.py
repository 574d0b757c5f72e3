"""BPR, cross-view contrastive and L2 terms, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Node, Tape
from .linalg import ParameterError


@dataclass(frozen=True)
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if not (len(self.users) == len(self.pos) == len(self.neg)):
            raise ValueError("triple arrays must have equal length")

    def __len__(self):
        return len(self.users)


def bpr_loss(tape: Tape, fused_u: Node, fused_i: Node, batch: TripleBatch) -> Node:
    """``-sum ln sigmoid(y_ui - y_uj)`` over the batch (summed, not averaged)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    u = tape.gather_rows(fused_u, batch.users)
    y_pos = tape.rowwise_dot(u, tape.gather_rows(fused_i, batch.pos))
    y_neg = tape.rowwise_dot(u, tape.gather_rows(fused_i, batch.neg))
    margin = tape.add(y_pos, tape.scale(y_neg, -1.0))
    return tape.scale(tape.sum(tape.log_sigmoid(margin)), -1.0)


def scl_loss(tape: Tape, h: Node, fused: Node, indices, tau: float, scope: str = "batch") -> Node:
    """Cross-view InfoNCE between hypergraph view ``h`` and fused view.

    Anchors are ``indices``. The contrast set is the same indices for
    ``scope="batch"`` and every row for ``scope="full"``.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    anchors = np.unique(np.asarray(indices, dtype=np.int64))
    if anchors.size == 0:
        raise ValueError("no anchors")
    if scope == "batch":
        contrast = anchors
    elif scope == "full":
        contrast = np.arange(h.shape[0])
    else:
        raise ParameterError(f"unknown contrast scope {scope!r}")
    return tape.contrastive_log_softmax(h, fused, anchors, contrast, tau)


def l2_penalty(tape: Tape, leaves, reg: float) -> Node:
    """``reg * sum of squared Frobenius norms``; ``leaves`` is a dict or list of nodes."""
    if reg < 0:
        raise ParameterError("L2 coefficient must be >= 0")
    nodes = list(leaves.values()) if isinstance(leaves, dict) else list(leaves)
    total = tape.frobenius_sq(nodes[0])
    for node in nodes[1:]:
        total = tape.add(total, tape.frobenius_sq(node))
    return tape.scale(total, reg)


def total_loss(tape: Tape, bpr: Node, scl_u: Node, scl_i: Node, reg: Node,
               alpha: float, beta: float) -> Node:
    out = tape.add(bpr, tape.scale(scl_u, alpha))
    out = tape.add(out, tape.scale(scl_i, beta))
    return tape.add(out, reg)


@dataclass
class LossTerms:
    total: Node
    bpr: Node
    scl_u: Node
    scl_i: Node
    reg: Node

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).value) for k in ("total", "bpr", "scl_u", "scl_i", "reg")}


def model_loss(outputs, batch: TripleBatch, config) -> LossTerms:
    """Assemble the full training objective for one batch on ``outputs.tape``.

    Contrastive terms are constant zeros when the matching hypergraph channel
    is ablated or when contrastive learning is switched off.
    """
    tape = outputs.tape
    bpr = bpr_loss(tape, outputs.fused_u, outputs.fused_i, batch)
    zero = tape.constant(0.0)
    if config.use_scl and config.use_u2u:
        scl_u = scl_loss(tape, outputs.h_u, outputs.fused_u, batch.users, config.tau,
                         config.contrast_scope)
    else:
        scl_u = zero
    if config.use_scl and config.use_i2i:
        items = np.concatenate([batch.pos, batch.neg])
        scl_i = scl_loss(tape, outputs.h_i, outputs.fused_i, items, config.tau,
                         config.contrast_scope)
    else:
        scl_i = zero
    reg = l2_penalty(tape, outputs.leaves, config.reg)
    total = total_loss(tape, bpr, scl_u, scl_i, reg, config.effective_alpha, config.effective_beta)
    return LossTerms(total, bpr, scl_u, scl_i, reg)
