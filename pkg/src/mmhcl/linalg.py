"""Dense/sparse containers and the numeric kernels the model is built from.

Dense matrices are plain ``float64`` numpy arrays. Sparse matrices use the
small :class:`SparseCsr` container below; products against dense blocks are
delegated to scipy's CSR kernel, which sums each output row in stored
(ascending column) order and is therefore bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class ParameterError(ValueError):
    """A numeric parameter is outside its valid range."""


@dataclass(frozen=True)
class SparseCsr:
    """Compressed sparse row matrix with sorted, duplicate-free column indices."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        rows, cols = self.shape
        if len(self.indptr) != rows + 1 or self.indptr[0] != 0:
            raise ShapeError(f"indptr of length {len(self.indptr)} does not fit {rows} rows")
        if self.indptr[-1] != len(self.indices) or len(self.indices) != len(self.data):
            raise ShapeError("indptr, indices and data disagree on nnz")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("row pointers must be nondecreasing")
        if len(self.indices):
            if self.indices.min() < 0 or self.indices.max() >= cols:
                raise ShapeError("column index out of range")
            # within-row strictly increasing: every step is positive except at row starts
            steps = np.diff(self.indices)
            row_start = np.zeros(len(self.indices), dtype=bool)
            row_start[self.indptr[1:-1][self.indptr[1:-1] < len(self.indices)]] = True
            if np.any((steps <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within a row")
            if np.any(self.data == 0):
                raise ValueError("explicit zeros are not allowed")

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseCsr":
        """Build from coordinate triples; duplicate coordinates are summed, zeros dropped."""
        m = sp.coo_matrix(
            (np.asarray(values, dtype=np.float64), (np.asarray(rows), np.asarray(cols))),
            shape=shape,
        ).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls._from_scipy(m)

    @classmethod
    def from_dense(cls, dense) -> "SparseCsr":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ShapeError("expected a 2-D array")
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def _from_scipy(cls, m) -> "SparseCsr":
        return cls(
            shape=(int(m.shape[0]), int(m.shape[1])),
            indptr=np.asarray(m.indptr, dtype=np.int64),
            indices=np.asarray(m.indices, dtype=np.int64),
            data=np.asarray(m.data, dtype=np.float64),
        )

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        row_of = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        out[row_of, self.indices] = self.data
        return out

    def row_sums(self) -> np.ndarray:
        row_of = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        return np.bincount(row_of, weights=self.data, minlength=self.rows).astype(np.float64)

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.indices, weights=self.data, minlength=self.cols).astype(np.float64)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]


def spmm(S: SparseCsr, X) -> np.ndarray:
    """Sparse-dense product ``S @ X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or S.cols != X.shape[0]:
        raise ShapeError(f"cannot multiply {S.shape} by {X.shape}")
    if S.nnz == 0:
        return np.zeros((S.rows, X.shape[1]))
    return np.asarray(S.to_scipy() @ X)


def transpose(S: SparseCsr) -> SparseCsr:
    rows, cols = S.shape
    row_of = np.repeat(np.arange(rows, dtype=np.int64), np.diff(S.indptr))
    # stable sort on column keeps row order ascending inside each output row
    order = np.argsort(S.indices, kind="stable")
    counts = np.bincount(S.indices, minlength=cols)
    indptr = np.zeros(cols + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return SparseCsr((cols, rows), indptr, row_of[order], S.data[order].copy())


def hstack(blocks: list[SparseCsr]) -> SparseCsr:
    """Horizontal concatenation of sparse blocks that share a row count."""
    if not blocks:
        raise ShapeError("nothing to concatenate")
    n = blocks[0].rows
    if any(b.rows != n for b in blocks):
        raise ShapeError("blocks must share the row count")
    m = sp.hstack([b.to_scipy() for b in blocks], format="csr")
    m.sort_indices()
    return SparseCsr._from_scipy(m)


def row_l2_normalize(X) -> np.ndarray:
    """Scale each row to unit Euclidean norm; zero rows stay zero."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    safe = np.where(norms > 0, norms, 1.0)
    return X / safe[:, None]


@dataclass(frozen=True)
class PropagationOperator:
    """Symmetric map ``D^-1/2 B W B^T D^-1/2`` applied in factored form.

    ``B`` is the node-by-hyperedge incidence matrix. ``edge_weight`` is
    ``None`` for the plain form (W = I) and ``1/deg(e)`` for the HGNN form.
    ``B B^T`` is never materialized.
    """

    incidence: SparseCsr
    inv_sqrt_degree: np.ndarray
    edge_weight: np.ndarray | None = None
    hgnn_style: bool = False
    incidence_t: SparseCsr = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.incidence.rows

    @property
    def n_edges(self) -> int:
        return self.incidence.cols

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != self.n_nodes:
            raise ShapeError(f"operator over {self.n_nodes} nodes got input {X.shape}")
        Z = spmm(self.incidence_t, self.inv_sqrt_degree[:, None] * X)
        if self.edge_weight is not None:
            Z = self.edge_weight[:, None] * Z
        return self.inv_sqrt_degree[:, None] * spmm(self.incidence, Z)

    def to_dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n_nodes))


def make_operator(B: SparseCsr, hgnn_style: bool = False) -> PropagationOperator:
    if B.nnz and np.any(B.data < 0):
        raise ParameterError("incidence matrix must be nonnegative")
    colsum = B.col_sums()
    edge_weight = None
    if hgnn_style:
        edge_weight = np.divide(1.0, colsum, out=np.zeros_like(colsum), where=colsum > 0)
        per_edge = edge_weight * colsum
    else:
        per_edge = colsum
    # row sums of B W B^T without forming it: d = B (W colsum(B))
    degree = spmm(B, per_edge[:, None])[:, 0]
    inv_sqrt = np.divide(1.0, np.sqrt(degree), out=np.zeros_like(degree), where=degree > 0)
    return PropagationOperator(B, inv_sqrt, edge_weight, hgnn_style, transpose(B))


def apply_operator(op, X) -> np.ndarray:
    return op.apply(X)


SIMILARITY_DECIMALS = 12


def cosine_topk(F, K: int, chunk_size: int = 1024) -> SparseCsr:
    """Binary KNN graph: row ``i`` marks the ``K`` most cosine-similar rows of ``F``.

    The row itself is always a candidate (similarity 1). Similarities are
    rounded to ``SIMILARITY_DECIMALS`` places and ties go to the lower column
    index. Rows with zero features get a single self-loop. Similarities
    are computed ``chunk_size`` rows at a time so no N x N block is held.
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[0]
    k = min(K, n)
    unit = row_l2_normalize(F)
    nonzero = np.einsum("ij,ij->i", F, F) > 0

    cols_out = []
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        # quantize so mathematically equal similarities tie despite rounding noise
        sims = np.round(np.clip(unit[lo:hi] @ unit.T, -1.0, 1.0), SIMILARITY_DECIMALS)
        local = np.arange(hi - lo)
        sims[local, lo + local] = 1.0
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for r in range(hi - lo):
            if nonzero[lo + r]:
                cols_out.append(np.sort(order[r]))
            else:
                cols_out.append(np.array([lo + r], dtype=np.int64))

    counts = np.array([len(c) for c in cols_out], dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.concatenate(cols_out).astype(np.int64) if n else np.zeros(0, dtype=np.int64)
    return SparseCsr((n, n), indptr, indices, np.ones(len(indices)))


def xavier_init(rows: int, cols: int, seed) -> np.ndarray:
    """Uniform Glorot draw in ``+-sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ParameterError("xavier_init needs positive dimensions")
    bound = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, cols))
