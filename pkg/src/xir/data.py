"""Interaction log ingestion, per-user splits, and popularity statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class EmptyDatasetError(ValueError):
    """Raised when an interaction source yields no usable rows."""


@dataclass(frozen=True)
class Interaction:
    """One (user, item) event after vocabulary mapping."""

    user_id: int
    item_id: int


class InteractionStore:
    """Immutable collection of (user, item) pairs grouped by user.

    Pairs are stored as two aligned int64 arrays sorted by user (stable, so
    the original within-user order survives).  ``user_index`` maps each user
    that has at least one pair to a contiguous ``slice`` over the arrays.
    ``num_users`` / ``num_items`` are the global vocabulary sizes and may be
    larger than the set of users/items actually present (e.g. in a test
    split).
    """

    def __init__(
        self,
        users: np.ndarray,
        items: np.ndarray,
        num_users: int,
        num_items: int,
        user_tokens: Optional[Sequence[str]] = None,
        item_tokens: Optional[Sequence[str]] = None,
    ):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape or users.ndim != 1:
            raise ValueError("users and items must be aligned 1-D arrays")
        if users.size and (users.min() < 0 or users.max() >= num_users):
            raise ValueError("user id out of range")
        if items.size and (items.min() < 0 or items.max() >= num_items):
            raise ValueError("item id out of range")

        order = np.argsort(users, kind="stable")
        self.users = users[order]
        self.items = items[order]
        self.users.setflags(write=False)
        self.items.setflags(write=False)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.user_tokens = list(user_tokens) if user_tokens is not None else None
        self.item_tokens = list(item_tokens) if item_tokens is not None else None

        self.user_index: dict[int, slice] = {}
        if self.users.size:
            uniq, starts = np.unique(self.users, return_index=True)
            bounds = np.append(starts, self.users.size)
            for u, lo, hi in zip(uniq.tolist(), bounds[:-1].tolist(), bounds[1:].tolist()):
                self.user_index[u] = slice(lo, hi)

    def __len__(self) -> int:
        return int(self.users.size)

    def items_of(self, user: int) -> np.ndarray:
        sl = self.user_index.get(user)
        if sl is None:
            return np.empty(0, dtype=np.int64)
        return self.items[sl]

    def pairs(self):
        """Iterate over Interaction records (mostly for tests and debugging)."""
        for u, i in zip(self.users.tolist(), self.items.tolist()):
            yield Interaction(u, i)


@dataclass(frozen=True)
class PopularityTable:
    """Smoothed item frequency distribution over the item vocabulary."""

    prob: np.ndarray
    log_prob: np.ndarray
    smoothing_epsilon: float

    def __post_init__(self):
        self.prob.setflags(write=False)
        self.log_prob.setflags(write=False)

    def __len__(self) -> int:
        return int(self.prob.size)


def _split_line(line: str, delimiter: Optional[str]) -> list[str]:
    if delimiter is not None:
        return line.split(delimiter)
    if "\t" in line:
        return line.split("\t")
    return line.split(",")


def _read_pairs(path, user_ids, item_ids, user_col, item_col, delimiter, row_filter):
    """Append one file's pairs to shared token maps; returns (users, items, skipped)."""
    users: list[int] = []
    items: list[int] = []
    skipped = 0
    min_cols = max(user_col, item_col) + 1
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = _split_line(line, delimiter)
            if len(cols) < min_cols or not cols[user_col] or not cols[item_col]:
                skipped += 1
                continue
            if row_filter is not None and not row_filter(cols):
                continue
            users.append(user_ids.setdefault(cols[user_col], len(user_ids)))
            items.append(item_ids.setdefault(cols[item_col], len(item_ids)))
    if skipped:
        logger.warning("%s: skipped %d malformed line(s)", path, skipped)
    return users, items, skipped


def load_interactions(
    path,
    user_col: int = 0,
    item_col: int = 1,
    delimiter: Optional[str] = None,
    row_filter: Optional[Callable[[list[str]], bool]] = None,
) -> InteractionStore:
    """Read a line-oriented interaction log into an InteractionStore.

    Each line holds at least ``max(user_col, item_col) + 1`` tab- or
    comma-separated columns; extra columns are ignored.  Tokens are mapped to
    dense indices in first-appearance order, so re-loading the same file
    always reproduces the same vocabulary.  Malformed lines are skipped and
    counted.  ``row_filter``, when given, sees the raw column list and may
    reject rows (e.g. a rating threshold); rejected rows are not counted as
    malformed.

    Raises OSError if the file cannot be read and EmptyDatasetError if no
    valid row remains.
    """
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    users, items, skipped = _read_pairs(path, user_ids, item_ids, user_col, item_col, delimiter, row_filter)
    if not users:
        raise EmptyDatasetError(f"{path}: no valid interaction rows")

    store = InteractionStore(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        num_users=len(user_ids),
        num_items=len(item_ids),
        user_tokens=list(user_ids),
        item_tokens=list(item_ids),
    )
    store.skipped_lines = skipped
    return store


def load_split(
    train_path,
    test_path,
    user_col: int = 0,
    item_col: int = 1,
    delimiter: Optional[str] = None,
    row_filter: Optional[Callable[[list[str]], bool]] = None,
) -> tuple[InteractionStore, InteractionStore]:
    """Load train and test files over one shared vocabulary.

    The train file defines tokens first, so its indices match a standalone
    load; test-only tokens extend the vocabulary at the end.
    """
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    args = (user_col, item_col, delimiter, row_filter)
    tr_users, tr_items, _ = _read_pairs(train_path, user_ids, item_ids, *args)
    te_users, te_items, _ = _read_pairs(test_path, user_ids, item_ids, *args)
    if not tr_users:
        raise EmptyDatasetError(f"{train_path}: no valid interaction rows")
    tokens = dict(user_tokens=list(user_ids), item_tokens=list(item_ids))
    train = InteractionStore(
        np.array(tr_users, np.int64), np.array(tr_items, np.int64),
        num_users=len(user_ids), num_items=len(item_ids), **tokens,
    )
    test = InteractionStore(
        np.array(te_users, np.int64), np.array(te_items, np.int64),
        num_users=len(user_ids), num_items=len(item_ids), **tokens,
    )
    return train, test


def save_interactions(store: InteractionStore, path, delimiter: str = "\t") -> None:
    """Write pairs back out in the same line format the loader reads."""
    path = Path(path)
    u_tok = store.user_tokens
    i_tok = store.item_tokens
    with path.open("w", encoding="utf-8") as fh:
        for u, i in zip(store.users.tolist(), store.items.tolist()):
            us = u_tok[u] if u_tok is not None else str(u)
            it = i_tok[i] if i_tok is not None else str(i)
            fh.write(f"{us}{delimiter}{it}\n")


def save_vocab(tokens: Sequence[str], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for idx, tok in enumerate(tokens):
            fh.write(f"{tok}\t{idx}\n")


def load_vocab(path) -> list[str]:
    tokens: list[tuple[str, int]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            tok, idx = line.split("\t")
            tokens.append((tok, int(idx)))
    tokens.sort(key=lambda t: t[1])
    return [tok for tok, _ in tokens]


def split_per_user(
    store: InteractionStore, train_ratio: float, seed: int
) -> tuple[InteractionStore, InteractionStore]:
    """Partition each user's items into train/test uniformly at random.

    A user with n items contributes floor(train_ratio * n) of them to the
    train split, but never fewer than one, so every user stays trainable.
    The two outputs partition the input exactly and share its vocabulary.
    """
    if not (0.0 < train_ratio < 1.0):
        raise ValueError(f"train_ratio must be in (0, 1), got {train_ratio}")

    rng = np.random.default_rng(seed)
    train_mask = np.zeros(len(store), dtype=bool)
    for user in sorted(store.user_index):
        sl = store.user_index[user]
        n = sl.stop - sl.start
        # tiny epsilon guards against 0.8 * 5 style float-representation slop
        n_train = min(n, max(1, math.floor(train_ratio * n + 1e-9)))
        picked = rng.permutation(n)[:n_train]
        train_mask[np.arange(sl.start, sl.stop)[picked]] = True

    def _sub(mask: np.ndarray) -> InteractionStore:
        return InteractionStore(
            store.users[mask],
            store.items[mask],
            num_users=store.num_users,
            num_items=store.num_items,
            user_tokens=store.user_tokens,
            item_tokens=store.item_tokens,
        )

    return _sub(train_mask), _sub(~train_mask)


def compute_popularity(train: InteractionStore, epsilon: float = 1.0) -> PopularityTable:
    """Normalized (and optionally smoothed) item frequencies of a train split.

    prob[i] = (f_i + epsilon) / (sum_j f_j + epsilon * N).  With epsilon > 0
    every item gets positive mass, so log-probabilities stay finite even for
    items that never occur in training.
    """
    n = train.num_items
    if n <= 0:
        raise ValueError("item vocabulary is empty")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    freq = np.bincount(train.items, minlength=n).astype(np.float64)
    total = freq.sum() + epsilon * n
    prob = (freq + epsilon) / total
    with np.errstate(divide="ignore"):
        log_prob = np.log(prob)
    return PopularityTable(prob=prob, log_prob=log_prob, smoothing_epsilon=float(epsilon))


def popularity_from_probs(prob: np.ndarray) -> PopularityTable:
    """Wrap an explicit probability vector (e.g. a synthetic skew) as a table."""
    prob = np.asarray(prob, dtype=np.float64)
    if (prob <= 0).any():
        raise ValueError("probabilities must be strictly positive")
    prob = prob / prob.sum()
    return PopularityTable(prob=prob, log_prob=np.log(prob), smoothing_epsilon=0.0)
