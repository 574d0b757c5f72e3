"""Interaction logs, feature files, train/valid/test splits and a planted corpus."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import ModalityBundle
from .linalg import SparseCsr

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MMHF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQQ")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class InteractionLog:
    n_users: int
    n_items: int
    pairs: np.ndarray  # (nnz, 2) int64, unique rows
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    duplicates: int = 0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.n_users <= 0 or self.n_items <= 0:
            raise DataError("interaction log needs at least one user and one item")
        if len(self.pairs):
            if self.pairs.min() < 0 or self.pairs[:, 0].max() >= self.n_users \
                    or self.pairs[:, 1].max() >= self.n_items:
                raise DataError("interaction index out of range")
            if len(np.unique(encode_pairs(self.pairs, self.n_items))) != len(self.pairs):
                raise DataError("duplicate interaction pairs")

    def __len__(self):
        return len(self.pairs)

    def matrix(self) -> SparseCsr:
        return interaction_matrix(self.pairs, self.n_users, self.n_items)


@dataclass
class DataSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int
    mode: str = "global"


def encode_pairs(pairs, n_items: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0] * n_items + pairs[:, 1]


def interaction_matrix(pairs, n_users: int, n_items: int) -> SparseCsr:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return SparseCsr.from_coo(pairs[:, 0], pairs[:, 1], np.ones(len(pairs)), (n_users, n_items))


def load_interactions(path) -> InteractionLog:
    """Read ``raw_user<TAB>raw_item[<TAB>...]`` lines; ids are remapped in first-seen order."""
    path = Path(path)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    pairs = []
    duplicates = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = users.setdefault(parts[0], len(users))
            i = items.setdefault(parts[1], len(items))
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            pairs.append((u, i))
    if duplicates:
        log.warning("%s: dropped %d duplicate interactions", path, duplicates)
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return InteractionLog(len(users), len(items), np.array(pairs, dtype=np.int64),
                          list(users), list(items), duplicates)


def write_interactions(path, pairs, user_ids=None, item_ids=None):
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i in np.asarray(pairs).reshape(-1, 2):
            ru = user_ids[u] if user_ids is not None else u
            ri = item_ids[i] if item_ids is not None else i
            fh.write(f"{ru}\t{ri}\n")


def _split_counts(n: int) -> tuple[int, int, int]:
    n_valid = n // 10
    n_test = n // 10
    return n - n_valid - n_test, n_valid, n_test


def make_split(log_: InteractionLog, seed: int, mode: str = "global") -> DataSplit:
    """8:1:1 partition by interaction count; validation and test take ``floor(n/10)`` each."""
    if len(log_) == 0:
        raise DataError("cannot split an empty log")
    rng = np.random.default_rng(seed)
    pairs = log_.pairs
    if mode == "global":
        order = rng.permutation(len(pairs))
        n_train, n_valid, _ = _split_counts(len(pairs))
        parts = np.split(pairs[order], [n_train, n_train + n_valid])
    elif mode == "per_user":
        train, valid, test = [], [], []
        by_user = np.argsort(pairs[:, 0], kind="stable")
        bounds = np.searchsorted(pairs[by_user, 0], np.arange(log_.n_users + 1))
        for u in range(log_.n_users):
            rows = pairs[by_user[bounds[u]:bounds[u + 1]]]
            rows = rows[rng.permutation(len(rows))]
            a, b, _ = _split_counts(len(rows))
            train.append(rows[:a])
            valid.append(rows[a:a + b])
            test.append(rows[a + b:])
        parts = [np.concatenate(p).reshape(-1, 2) for p in (train, valid, test)]
    else:
        raise DataError(f"unknown split mode {mode!r}")
    return DataSplit(*(np.ascontiguousarray(p, dtype=np.int64) for p in parts), seed=seed, mode=mode)


def write_feature_matrix(path, matrix):
    matrix = np.asarray(matrix, dtype="<f4")
    rows, cols = matrix.shape
    with Path(path).open("wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def load_feature_matrix(path) -> np.ndarray:
    """Binary ``MMHF`` file (float32 payload) or CSV; returned as float64."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == FEATURE_MAGIC:
        if len(raw) < _FEATURE_HEADER.size:
            raise DataError(f"{path}: truncated header")
        _, version, rows, cols = _FEATURE_HEADER.unpack_from(raw)
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported feature format version {version}")
        expected = rows * cols * 4
        payload = raw[_FEATURE_HEADER.size:]
        if len(payload) != expected:
            raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
        out = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    else:
        try:
            text = raw.decode("utf-8")
            rows_ = [[float(x) for x in line.replace(",", " ").split()]
                     for line in text.splitlines() if line.strip()]
        except (UnicodeDecodeError, ValueError) as exc:
            raise DataError(f"{path}: not a feature file ({exc})") from exc
        if not rows_ or len({len(r) for r in rows_}) != 1:
            raise DataError(f"{path}: ragged or empty CSV feature matrix")
        out = np.array(rows_, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(out))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"{path}: non-finite feature at row {r}, column {c}")
    return out


def generate_synthetic(users: int, items: int, blocks: int, noise: float, seed: int,
                       modalities=("visual", "textual"), sigma: float = 0.1,
                       density: float = 0.3):
    """Planted block corpus.

    Each user picks ``density`` of its own block's items plus, for each such
    pick, an extra cross-block item with probability ``noise``. Each modality
    feature is the item's one-hot block indicator plus N(0, sigma^2) jitter.
    """
    if blocks < 1 or users % blocks or items % blocks:
        raise DataError(f"blocks={blocks} must divide users={users} and items={items}")
    if not 0 <= noise <= 1:
        raise DataError("noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    upb, ipb = users // blocks, items // blocks
    user_block = np.arange(users) // upb
    item_block = np.arange(items) // ipb
    per_user = max(1, int(round(density * ipb)))

    pairs = []
    for u in range(users):
        b = user_block[u]
        own = b * ipb + rng.choice(ipb, size=per_user, replace=False)
        n_cross = rng.binomial(per_user, noise)
        others = np.flatnonzero(item_block != b)
        cross = rng.choice(others, size=min(n_cross, len(others)), replace=False) \
            if n_cross and len(others) else np.zeros(0, dtype=np.int64)
        for i in np.sort(np.concatenate([own, cross])):
            pairs.append((u, int(i)))
    log_ = InteractionLog(users, items, np.array(pairs, dtype=np.int64),
                          [str(u) for u in range(users)], [str(i) for i in range(items)])

    feats = {}
    for tag in modalities:
        onehot = np.zeros((items, blocks))
        onehot[np.arange(items), item_block] = 1.0
        feats[tag] = onehot + rng.normal(0.0, sigma, size=(items, blocks))
    return log_, ModalityBundle.from_dict(feats)
