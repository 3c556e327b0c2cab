"""Negative-selection machinery: resampling, the sample cache, MNS, and
streaming frequency estimation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import PopularityTable


class EmptySupportError(ValueError):
    """Raised when every categorical weight is zero."""


class Source(enum.Enum):
    BATCH = "batch"
    CACHE = "cache"
    UNIFORM = "uniform"


@dataclass
class ResampleSet:
    """Multiset of resampled item ids for one query.

    ``items`` lists every draw, so multiplicity is explicit and
    ``len(items)`` equals the requested sample count.  ``positions`` holds
    each draw's index into the candidate list it was drawn from, when known;
    the losses use it to fold duplicate draws without an id lookup.
    """

    items: np.ndarray
    source: Source
    positions: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.items.size)

    def multiplicities(self) -> tuple[np.ndarray, np.ndarray]:
        return np.unique(self.items, return_counts=True)


class ResampleBatch:
    """Per-query resample results for a whole mini-batch, stored as counts.

    Behaves as a sequence of ResampleSet (one per query row) while keeping
    the underlying draw counts in one (rows, candidates) matrix so the loss
    and the occurrence update can skip re-aggregating millions of draws.
    The expanded per-draw arrays are materialized only on element access.
    """

    def __init__(self, candidate_items: np.ndarray, counts: np.ndarray, source: Source):
        self.candidate_items = candidate_items
        self.counts = counts
        self.source = source
        self.sample_count = int(counts[0].sum()) if counts.shape[0] else 0
        self._positions: Optional[np.ndarray] = None
        self._items: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.counts.shape[0]

    def _materialize(self):
        if self._positions is None:
            rows, n = self.counts.shape
            # one flat repeat covers every row: each row's counts sum to m
            flat = np.repeat(np.tile(np.arange(n, dtype=np.int64), rows), self.counts.ravel())
            self._positions = flat.reshape(rows, self.sample_count)
            self._items = self.candidate_items[self._positions]

    def __getitem__(self, r):
        self._materialize()
        return ResampleSet(items=self._items[r], source=self.source, positions=self._positions[r])

    def __iter__(self):
        for r in range(len(self)):
            yield self[r]


@dataclass
class SampleCache:
    """Fixed-size item cache plus the per-item resample occurrence counts."""

    items: np.ndarray
    occurrence: np.ndarray

    @classmethod
    def create(cls, num_items: int, cache_size: int, rng: np.random.Generator) -> "SampleCache":
        if cache_size < 1:
            raise ValueError("cache size must be positive")
        items = rng.integers(0, num_items, size=cache_size, dtype=np.int64)
        return cls(items=items, occurrence=np.zeros(num_items, dtype=np.int64))

    @property
    def size(self) -> int:
        return int(self.items.size)


# -- categorical sampling ---------------------------------------------------

# rows per grouped searchsorted call: large enough to amortize call overhead,
# small enough that the concatenated CDF block stays cache-resident
_SEARCH_GROUP = 64
_SMALL_M = 8


def _sorted_uniforms(rng: np.random.Generator, rows: int, m: int) -> np.ndarray:
    """Row-wise ascending uniforms via exponential spacings (no sort).

    Normalized partial sums of m+1 i.i.d. exponentials are distributed
    exactly as the order statistics of m uniforms; ascending queries keep
    the CDF search cache-friendly.  Draw order is irrelevant everywhere
    this is used: the draws form an exchangeable multiset.
    """
    e = rng.standard_exponential((rows, m + 1), dtype=np.float32)
    s = np.cumsum(e, axis=1, dtype=np.float32)
    return s[:, :-1] / s[:, -1:]


def _grouped_searchsorted(base: np.ndarray, queries: np.ndarray, side: str) -> np.ndarray:
    """Row-wise searchsorted: base and queries are (R, *) row-aligned.

    Row blocks are offset by their index so one flat searchsorted serves a
    whole block; values must lie in [0, 1] for the offsets to nest.
    """
    rows, n = base.shape
    out = np.empty(queries.shape, dtype=np.int64)
    for lo in range(0, rows, _SEARCH_GROUP):
        hi = min(lo + _SEARCH_GROUP, rows)
        off = np.arange(hi - lo, dtype=base.dtype)[:, None]
        flat = np.searchsorted((base[lo:hi] + off).ravel(), (queries[lo:hi] + off).ravel(), side=side)
        out[lo:hi] = flat.reshape(hi - lo, -1) - (np.arange(hi - lo, dtype=np.int64) * n)[:, None]
    return out


def _row_cdfs(log_weights: np.ndarray, m: int) -> np.ndarray:
    """Validated float32 row CDFs of softmax(log_weights), each ending at 1."""
    lw = np.atleast_2d(np.asarray(log_weights, dtype=np.float64))
    if m < 1:
        raise ValueError("sample count must be >= 1")
    if np.isnan(lw).any() or np.isposinf(lw).any():
        raise ValueError("log weights must be finite or -inf")
    top = np.max(lw, axis=1, keepdims=True)
    if not np.isfinite(top).all():
        raise EmptySupportError("a row has no finite log weight")
    # float32 is plenty for sampling: CDF quantization errors are ~1e-7,
    # far below any tolerance the draws feed into
    p = np.exp((lw - top), dtype=np.float64).astype(np.float32)
    cdf = np.cumsum(p, axis=1, dtype=np.float32)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    return cdf


def categorical_counts(log_weights: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Per-row draw counts of m i.i.d. softmax draws with replacement.

    Equivalent in law to tallying ``categorical_rows``; computed directly by
    locating each row's CDF knots among m sorted uniforms, so the cost is
    one search per candidate instead of per draw plus a re-aggregation.
    """
    cdf = _row_cdfs(log_weights, m)
    u = _sorted_uniforms(rng, cdf.shape[0], m)
    # cumulative[j] = #draws with u < cdf[j]; side='left' keeps knot ties out
    cumulative = _grouped_searchsorted(u, cdf, side="left")
    counts = np.empty_like(cumulative)
    counts[:, 0] = cumulative[:, 0]
    np.subtract(cumulative[:, 1:], cumulative[:, :-1], out=counts[:, 1:])
    return counts


def categorical_rows(log_weights: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m indices per row, with replacement, from softmax(log_weights).

    Entries equal to -inf are excluded from the support.  Returns an
    (R, m) index array; within a row the draws are i.i.d. (reported in
    ascending order for m > 8).  Raises EmptySupportError for any
    all-excluded row.
    """
    cdf = _row_cdfs(log_weights, m)
    rows, n = cdf.shape
    if m <= _SMALL_M:
        u = rng.random((rows, m), dtype=np.float32)
        # side='right' skips zero-probability entries even on exact knot hits
        return _grouped_searchsorted(cdf, u, side="right")
    counts = np.empty((rows, n), dtype=np.int64)
    u = _sorted_uniforms(rng, rows, m)
    cumulative = _grouped_searchsorted(u, cdf, side="left")
    counts[:, 0] = cumulative[:, 0]
    np.subtract(cumulative[:, 1:], cumulative[:, :-1], out=counts[:, 1:])
    return np.repeat(np.tile(np.arange(n, dtype=np.int64), rows), counts.ravel()).reshape(rows, m)


def categorical_draw(log_weights: np.ndarray, m: int, rng: np.random.Generator) -> ResampleSet:
    """m i.i.d. draws from one unnormalized log-weight vector."""
    draws = categorical_rows(np.asarray(log_weights, dtype=np.float64)[None, :], m, rng)[0]
    return ResampleSet(items=draws, source=Source.UNIFORM, positions=draws.copy())


# -- importance-resampling weights -------------------------------------------


def bir_weights(scores: np.ndarray, log_pop: np.ndarray) -> np.ndarray:
    """Per-candidate resampling probabilities softmax(score - log_pop).

    Accepts a single row or a matrix of rows; normalization is done with
    max-subtraction so any finite score scale is safe.
    """
    z = np.asarray(scores, dtype=np.float64) - np.asarray(log_pop, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def bir_resample(
    score_matrix: np.ndarray,
    batch_items: np.ndarray,
    pop: PopularityTable,
    m: int,
    rng: np.random.Generator,
) -> ResampleBatch:
    """Resample m candidates per query from the in-batch items.

    Row r of ``score_matrix`` holds query r's scores against
    ``batch_items``; draws use weights proportional to
    exp(score - log pop(item)) within the row.  Duplicates are kept.
    """
    batch_items = np.asarray(batch_items, dtype=np.int64)
    log_w = score_matrix - pop.log_prob[batch_items][None, :]
    return ResampleBatch(batch_items, categorical_counts(log_w, m, rng), Source.BATCH)


def cache_resample(
    score_matrix_cache: np.ndarray,
    cache: SampleCache,
    pop: PopularityTable,
    m: int,
    rng: np.random.Generator,
) -> ResampleBatch:
    """Resample m cached items per query, popularity-corrected like bir."""
    log_w = score_matrix_cache - pop.log_prob[cache.items][None, :]
    return ResampleBatch(cache.items, categorical_counts(log_w, m, rng), Source.CACHE)


def update_occurrence_and_cache(
    cache: SampleCache,
    resampled,
    rng: np.random.Generator,
    count_distinct: bool = False,
) -> SampleCache:
    """Fold a step's resampled sets into the occurrence counts, refresh cache.

    ``resampled`` is one collection of per-user ResampleSets (or a list of
    such collections, e.g. batch-side and cache-side together).  Every draw
    counts with its multiplicity by default; ``count_distinct`` switches to
    counting each item at most once per step.  The refreshed cache is drawn
    with replacement proportionally to the occurrence counts (uniformly
    while they are still all zero).  Mutates and returns ``cache``.
    """
    collections = resampled
    if not isinstance(resampled, (list, tuple)) or (
        len(resampled) and isinstance(resampled[0], ResampleSet)
    ):
        collections = [resampled]

    n = cache.occurrence.size
    if count_distinct:
        drawn = [rs.items for coll in collections for rs in coll]
        seen = np.unique(np.concatenate(drawn)) if drawn else np.empty(0, np.int64)
        cache.occurrence += np.bincount(seen, minlength=n)
    else:
        for coll in collections:
            if isinstance(coll, ResampleBatch):
                per_candidate = coll.counts.sum(axis=0)
                cache.occurrence += np.bincount(
                    coll.candidate_items, weights=per_candidate, minlength=n
                ).astype(np.int64)
            else:
                drawn = (
                    np.concatenate([rs.items for rs in coll]) if len(coll) else np.empty(0, np.int64)
                )
                cache.occurrence += np.bincount(drawn, minlength=n)

    occ = cache.occurrence.astype(np.float64)
    if occ.sum() == 0.0:
        log_w = np.zeros_like(occ)
    else:
        with np.errstate(divide="ignore"):
            log_w = np.log(occ)
    cache.items = categorical_rows(log_w[None, :], cache.size, rng)[0]
    return cache


def save_occurrence(cache: SampleCache, path) -> None:
    """Dump the occurrence vector as item_index<TAB>count lines."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for idx, count in enumerate(cache.occurrence.tolist()):
            fh.write(f"{idx}\t{count}\n")


# -- mixed negative sampling --------------------------------------------------


def mns_candidates(
    batch_items: np.ndarray,
    b_prime: int,
    pop: PopularityTable,
    rng: np.random.Generator,
    uniform_ids: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batch items plus B' uniform draws, with their mixture log-proposal.

    The proposal for every candidate is q(i) = a * pop(i) + (1 - a) / N with
    a = |B| / (|B| + B'), the marginal law of the concatenated pool.  With
    B' = 0 this reduces exactly to the popularity proposal.  Callers that
    already drew (and encoded) the uniform ids pass them via ``uniform_ids``.
    """
    if b_prime < 0:
        raise ValueError("B' must be non-negative")
    batch_items = np.asarray(batch_items, dtype=np.int64)
    n = pop.prob.size
    if uniform_ids is None:
        uniform_ids = rng.integers(0, n, size=b_prime, dtype=np.int64)
    elif uniform_ids.size != b_prime:
        raise ValueError("uniform_ids length must equal b_prime")
    candidates = np.concatenate([batch_items, uniform_ids])
    alpha = batch_items.size / (batch_items.size + b_prime)
    log_q = np.log(alpha * pop.prob[candidates] + (1.0 - alpha) / n)
    return candidates, log_q


# -- streaming frequency estimation -------------------------------------------

_HASH_PRIME = 2_147_483_647  # 2^31 - 1; products with item ids stay in int64


class StreamFreqEstimator:
    """Item frequency from hashed gaps between consecutive sightings.

    Each of ``num_arrays`` hash arrays stores, per slot, the step at which
    it was last hit and an exponential moving average of the gaps between
    hits.  An item's frequency estimate is the reciprocal of its mean gap
    across arrays; multiple arrays damp hash-collision error.
    """

    def __init__(
        self,
        num_items: int,
        num_arrays: int = 5,
        array_len: Optional[int] = None,
        decay: float = 0.95,
        seed: int = 0,
    ):
        if array_len is None:
            array_len = 1 << max(1, int(np.ceil(np.log2(max(2 * num_items, 2)))))
        self.num_items = int(num_items)
        self.num_arrays = int(num_arrays)
        self.array_len = int(array_len)
        self.decay = float(decay)
        self.global_step = 0
        rng = np.random.default_rng(seed)
        self.hash_a = rng.integers(1, _HASH_PRIME, size=num_arrays, dtype=np.int64)
        self.hash_b = rng.integers(0, _HASH_PRIME, size=num_arrays, dtype=np.int64)
        self.last_step = np.zeros((num_arrays, array_len), dtype=np.int64)
        self.delta_avg = np.zeros((num_arrays, array_len), dtype=np.float64)

    def slots(self, items: np.ndarray) -> np.ndarray:
        """(num_arrays, len(items)) hash slots."""
        items = np.asarray(items, dtype=np.int64)
        return (self.hash_a[:, None] * items[None, :] + self.hash_b[:, None]) % _HASH_PRIME % self.array_len

    def estimate(self, items: np.ndarray) -> np.ndarray:
        """Current frequency estimates clipped into (1e-9, 1]."""
        mean_delta = self.delta_avg[np.arange(self.num_arrays)[:, None], self.slots(items)].mean(axis=0)
        est = np.where(mean_delta > 0.0, 1.0 / np.where(mean_delta > 0.0, mean_delta, 1.0), 0.0)
        return np.clip(est, 1e-9, 1.0)


def stream_freq_update_and_estimate(
    est: StreamFreqEstimator, observed_items: np.ndarray
) -> np.ndarray:
    """Advance one step, record the observed items, return their estimates.

    Items observed more than once in the same step update each slot once;
    gaps are measured between steps.  Distinct items colliding in a slot
    share one update, as the gap depends only on the slot.
    """
    observed_items = np.asarray(observed_items, dtype=np.int64)
    est.global_step += 1
    t = est.global_step
    uniq = np.unique(observed_items)
    slot_rows = est.slots(uniq)
    for a in range(est.num_arrays):
        hit = np.unique(slot_rows[a])
        delta = (t - est.last_step[a, hit]).astype(np.float64)
        est.delta_avg[a, hit] = est.decay * est.delta_avg[a, hit] + (1.0 - est.decay) * delta
        est.last_step[a, hit] = t
    return est.estimate(observed_items)
