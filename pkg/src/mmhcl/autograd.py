"""Eager reverse-mode differentiation over a small, fixed set of primitives.

Every primitive computes its value when recorded and stores whatever its
adjoint needs. ``backward`` walks the tape once in reverse and returns the
gradient of a scalar node with respect to every named leaf.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import ParameterError, ShapeError, row_l2_normalize

PRIMITIVES = (
    "leaf",
    "constant",
    "apply_operator",
    "add",
    "scale",
    "gather_rows",
    "concat_rows",
    "row_l2_normalize",
    "row_mean",
    "rowwise_dot",
    "log_sigmoid",
    "contrastive_log_softmax",
    "sum",
    "frobenius_sq",
)


class TapeError(RuntimeError):
    pass


@dataclass
class Node:
    id: int
    primitive: str
    inputs: tuple[int, ...]
    value: np.ndarray
    saved: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.value.shape


def _norms(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def _normalize_backward(x, g):
    # d(x/|x|) applied to g: (g - y (y.g)) / |x|, zero rows get zero gradient
    n = _norms(x)
    safe = np.where(n > 0, n, 1.0)
    y = x / safe[:, None]
    out = (g - y * np.einsum("ij,ij->i", y, g)[:, None]) / safe[:, None]
    out[n == 0] = 0.0
    return out


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid_neg(z):
    # sigma(-z), computed without overflow
    return np.exp(-np.logaddexp(0.0, z))


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def value(self, node: Node | int) -> np.ndarray:
        return self.nodes[node if isinstance(node, int) else node.id].value

    def _push(self, primitive, inputs, value, **saved) -> Node:
        if self._consumed:
            raise TapeError("tape already used for a backward pass")
        node = Node(len(self.nodes), primitive, tuple(n.id for n in inputs), value, saved)
        self.nodes.append(node)
        return node

    # -- generic entry point -------------------------------------------------

    def record(self, primitive: str, *inputs, **attrs) -> Node:
        if primitive not in PRIMITIVES or primitive in ("leaf", "constant"):
            raise TapeError(f"unsupported primitive: {primitive!r}")
        return getattr(self, primitive)(*inputs, **attrs)

    # -- sources ------------------------------------------------------------

    def leaf(self, name: str, value) -> Node:
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} already on tape")
        node = self._push("leaf", (), np.asarray(value, dtype=np.float64), name=name)
        self.leaves[name] = node.id
        return node

    def constant(self, value) -> Node:
        return self._push("constant", (), np.asarray(value, dtype=np.float64))

    # -- primitives ---------------------------------------------------------

    def apply_operator(self, op, x: Node) -> Node:
        return self._push("apply_operator", (x,), op.apply(x.value), op=op)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
        return self._push("add", (a, b), a.value + b.value)

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", (a,), a.value * c, c=float(c))

    def gather_rows(self, a: Node, index) -> Node:
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
            raise ShapeError("gather_rows: index out of range")
        return self._push("gather_rows", (a,), a.value[index], index=index)

    def concat_rows(self, *parts: Node) -> Node:
        if len({p.shape[1] for p in parts}) != 1:
            raise ShapeError("concat_rows: column counts differ")
        sizes = [p.shape[0] for p in parts]
        return self._push("concat_rows", parts, np.vstack([p.value for p in parts]), sizes=sizes)

    def row_l2_normalize(self, a: Node) -> Node:
        return self._push("row_l2_normalize", (a,), row_l2_normalize(a.value))

    def row_mean(self, *parts: Node) -> Node:
        if len({p.shape for p in parts}) != 1:
            raise ShapeError("row_mean: shapes differ")
        total = parts[0].value.copy()
        for p in parts[1:]:
            total += p.value
        return self._push("row_mean", parts, total / len(parts))

    def rowwise_dot(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"rowwise_dot: {a.shape} vs {b.shape}")
        return self._push("rowwise_dot", (a, b), np.einsum("ij,ij->i", a.value, b.value))

    def log_sigmoid(self, z: Node) -> Node:
        return self._push("log_sigmoid", (z,), _log_sigmoid(z.value))

    def sum(self, a: Node) -> Node:
        return self._push("sum", (a,), np.asarray(a.value.sum()))

    def frobenius_sq(self, a: Node) -> Node:
        return self._push("frobenius_sq", (a,), np.asarray(np.sum(a.value * a.value)))

    def contrastive_log_softmax(self, h: Node, e: Node, anchors, contrast, tau: float) -> Node:
        """Sum over anchors of ``logsumexp(denominator logits) - positive logit``.

        For anchor ``a`` the positive logit is ``s(h_a, e_a)``; the
        denominator runs over ``c`` in ``contrast`` with both ``s(h_c, e_a)``
        and ``s(e_c, e_a)``, where ``s`` is cosine similarity over ``tau``.
        """
        if tau <= 0:
            raise ParameterError(f"temperature must be positive, got {tau}")
        if h.shape != e.shape:
            raise ShapeError(f"contrastive: {h.shape} vs {e.shape}")
        anchors = np.asarray(anchors, dtype=np.int64)
        contrast = np.asarray(contrast, dtype=np.int64)
        if anchors.size == 0 or contrast.size == 0:
            raise ShapeError("contrastive: empty anchor or contrast set")
        hn = row_l2_normalize(h.value)
        en = row_l2_normalize(e.value)
        ea = en[anchors]
        logits = np.hstack([ea @ hn[contrast].T, ea @ en[contrast].T]) / tau
        pos = np.einsum("ij,ij->i", hn[anchors], ea) / tau
        shift = logits.max(axis=1, keepdims=True)
        lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
        per_anchor = lse - pos
        probs = np.exp(logits - lse[:, None])
        return self._push(
            "contrastive_log_softmax", (h, e), np.asarray(per_anchor.sum()),
            anchors=anchors, contrast=contrast, tau=float(tau), probs=probs,
            per_anchor=per_anchor,
        )

    # -- reverse pass -------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every leaf, keyed by leaf name."""
        if loss.value.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        return self._backward_from(loss, np.asarray(1.0))

    def _backward_from(self, loss: Node, seed: np.ndarray) -> dict[str, np.ndarray]:
        if self._consumed:
            raise TapeError("tape already used for a backward pass")
        if seed.shape != loss.value.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match node {loss.value.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.id: seed}

        def acc(i, g):
            if i in grads:
                grads[i] = grads[i] + g
            else:
                grads[i] = g

        for node in reversed(self.nodes[: loss.id + 1]):
            if node.primitive in ("leaf", "constant"):
                continue
            g = grads.pop(node.id, None)
            if g is None:
                continue
            ins = [self.nodes[i] for i in node.inputs]
            s = node.saved
            p = node.primitive
            if p == "apply_operator":
                acc(ins[0].id, s["op"].apply(g))
            elif p == "add":
                acc(ins[0].id, g)
                acc(ins[1].id, g)
            elif p == "scale":
                acc(ins[0].id, g * s["c"])
            elif p == "gather_rows":
                out = np.zeros_like(ins[0].value)
                np.add.at(out, s["index"], g)
                acc(ins[0].id, out)
            elif p == "concat_rows":
                start = 0
                for part, size in zip(ins, s["sizes"]):
                    acc(part.id, g[start:start + size])
                    start += size
            elif p == "row_l2_normalize":
                acc(ins[0].id, _normalize_backward(ins[0].value, g))
            elif p == "row_mean":
                for part in ins:
                    acc(part.id, g / len(ins))
            elif p == "rowwise_dot":
                a, b = ins
                acc(a.id, g[:, None] * b.value)
                acc(b.id, g[:, None] * a.value)
            elif p == "log_sigmoid":
                acc(ins[0].id, g * _sigmoid_neg(ins[0].value))
            elif p == "sum":
                acc(ins[0].id, np.full_like(ins[0].value, g))
            elif p == "frobenius_sq":
                acc(ins[0].id, 2.0 * g * ins[0].value)
            elif p == "contrastive_log_softmax":
                gh, ge = _contrastive_backward(ins[0].value, ins[1].value, s, g)
                acc(ins[0].id, gh)
                acc(ins[1].id, ge)
            else:  # pragma: no cover - record() guards this
                raise TapeError(f"no adjoint for {p}")

        out = {}
        for name, i in self.leaves.items():
            g = grads.get(i)
            out[name] = np.zeros_like(self.nodes[i].value) if g is None else np.asarray(g)
        return out


def _contrastive_backward(h, e, saved, g):
    anchors, contrast, tau, probs = saved["anchors"], saved["contrast"], saved["tau"], saved["probs"]
    hn = row_l2_normalize(h)
    en = row_l2_normalize(e)
    nc = len(contrast)
    p_h, p_e = probs[:, :nc], probs[:, nc:]
    ea = en[anchors]
    # gradients w.r.t. the normalized tables, accumulated by scatter-add
    d_hn = np.zeros_like(hn)
    d_en = np.zeros_like(en)
    np.add.at(d_en, anchors, (p_h @ hn[contrast] + p_e @ en[contrast] - hn[anchors]) / tau)
    np.add.at(d_hn, contrast, p_h.T @ ea / tau)
    np.add.at(d_en, contrast, p_e.T @ ea / tau)
    np.add.at(d_hn, anchors, -ea / tau)
    return _normalize_backward(h, g * d_hn), _normalize_backward(e, g * d_en)
