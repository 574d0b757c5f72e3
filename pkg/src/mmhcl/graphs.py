"""Construction of the three fixed propagation structures.

* u2u: users are nodes, items are hyperedges (incidence = interaction matrix).
* i2i: items are nodes, per-modality KNN neighbour lists are hyperedges.
* backbone: symmetric-normalized user-item bipartite adjacency (LightGCN).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    ParameterError,
    PropagationOperator,
    ShapeError,
    SparseCsr,
    cosine_topk,
    hstack,
    make_operator,
    spmm,
)

MODALITY_ORDER = ("visual", "acoustic", "textual")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityBundle:
    """Item feature matrices keyed by modality, held in canonical tag order."""

    modalities: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self):
        if not self.modalities:
            raise GraphError("at least one modality is required")
        tags = [t for t, _ in self.modalities]
        unknown = set(tags) - set(MODALITY_ORDER)
        if unknown:
            raise GraphError(f"unknown modality tags: {sorted(unknown)}")
        if len(set(tags)) != len(tags):
            raise GraphError("duplicate modality tag")
        if tags != sorted(tags, key=MODALITY_ORDER.index):
            raise GraphError("modalities must follow visual, acoustic, textual order")
        n = {f.shape[0] for _, f in self.modalities}
        if len(n) != 1:
            raise ShapeError(f"modality row counts disagree: {sorted(n)}")

    @classmethod
    def from_dict(cls, features: dict) -> "ModalityBundle":
        ordered = sorted(features.items(), key=lambda kv: MODALITY_ORDER.index(kv[0])
                         if kv[0] in MODALITY_ORDER else len(MODALITY_ORDER))
        return cls(tuple((t, np.asarray(f, dtype=np.float64)) for t, f in ordered))

    @property
    def n_items(self) -> int:
        return self.modalities[0][1].shape[0]

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.modalities]


@dataclass(frozen=True)
class NormalizedAdjacency:
    """``D^-1/2 [[0, A], [A^T, 0]] D^-1/2`` over ``M + N`` stacked nodes."""

    matrix: SparseCsr
    n_users: int
    n_items: int

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != self.n_nodes:
            raise ShapeError(f"operator over {self.n_nodes} nodes got input {X.shape}")
        return spmm(self.matrix, X)

    def to_dense(self) -> np.ndarray:
        return self.matrix.to_dense()


@dataclass(frozen=True)
class GraphSet:
    u2u: PropagationOperator
    i2i: PropagationOperator
    backbone: NormalizedAdjacency

    @property
    def n_users(self) -> int:
        return self.backbone.n_users

    @property
    def n_items(self) -> int:
        return self.backbone.n_items


def _check_binary(A: SparseCsr):
    if A.nnz and not np.all(A.data == 1.0):
        raise GraphError("interaction matrix must be binary")


def build_u2u(A: SparseCsr, hgnn_style: bool = False) -> PropagationOperator:
    if A.nnz == 0:
        raise GraphError("interaction matrix is empty")
    _check_binary(A)
    return make_operator(A, hgnn_style=hgnn_style)


def knn_incidence(features: ModalityBundle, K: int) -> SparseCsr:
    """Concatenated per-modality KNN incidence, shape ``N x (N * |modalities|)``."""
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    return hstack([cosine_topk(f, K) for _, f in features.modalities])


def build_i2i(features: ModalityBundle, K: int, hgnn_style: bool = False) -> PropagationOperator:
    return make_operator(knn_incidence(features, K), hgnn_style=hgnn_style)


def build_backbone(A: SparseCsr) -> NormalizedAdjacency:
    _check_binary(A)
    m, n = A.shape
    row_of = np.repeat(np.arange(m, dtype=np.int64), np.diff(A.indptr))
    item_of = A.indices
    deg_u = np.bincount(row_of, minlength=m).astype(np.float64)
    deg_i = np.bincount(item_of, minlength=n).astype(np.float64)
    w = 1.0 / np.sqrt(deg_u[row_of] * deg_i[item_of])
    rows = np.concatenate([row_of, m + item_of])
    cols = np.concatenate([m + item_of, row_of])
    vals = np.concatenate([w, w])
    return NormalizedAdjacency(SparseCsr.from_coo(rows, cols, vals, (m + n, m + n)), m, n)


def build_graphs(A: SparseCsr, features: ModalityBundle, K: int,
                 hgnn_style: bool = False) -> GraphSet:
    if features.n_items != A.cols:
        raise ShapeError(f"features describe {features.n_items} items, interactions {A.cols}")
    return GraphSet(
        u2u=build_u2u(A, hgnn_style),
        i2i=build_i2i(features, K, hgnn_style),
        backbone=build_backbone(A),
    )
