"""Forward values and analytic gradients for the four training objectives.

Every loss returns a LossBatchOutput holding the scalar batch loss plus
coefficient blocks d(loss)/d(score).  The coefficients multiply raw scores,
so the backward pass only needs the representations each block already
carries; ``param_grads`` turns blocks into per-table row gradients.

All losses are mean-reduced over the batch and computed with max-subtracted
log-sum-exp, so scores up to |s| ~ 80 cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .samplers import ResampleBatch, ResampleSet


class OracleScaleError(ValueError):
    """Raised when an exact-enumeration operation is asked to run too large."""


FULL_SOFTMAX_MAX_ITEMS = 50_000


@dataclass
class EncodedCandidates:
    """Item representations a caller already computed for a list of ids."""

    ids: np.ndarray
    reprs: np.ndarray
    trace: object = None  # TowerTrace when the model has an item tower


@dataclass
class ScoreGradBlock:
    """d(loss)/d(score) for one group of (query row, candidate) pairs.

    Shared blocks pair every row with one candidate list: ``item_ids`` is
    (n,) and ``coeff`` is (B, n).  Per-row blocks pair row r with the single
    item ``item_ids[r]``: both are length B.  ``item_reprs`` (and ``trace``
    for tower models) are aligned with ``item_ids``.
    """

    item_ids: np.ndarray
    coeff: np.ndarray
    item_reprs: np.ndarray
    per_row: bool = False
    trace: object = None


@dataclass
class LossBatchOutput:
    loss: float
    users: np.ndarray
    query_reprs: np.ndarray
    blocks: list[ScoreGradBlock]

    def grad_scores(self) -> dict[tuple[int, int], float]:
        """Gradient entries keyed by (user, item); for small instances."""
        out: dict[tuple[int, int], float] = {}
        users = self.users.tolist()
        for block in self.blocks:
            if block.per_row:
                for r, (i, c) in enumerate(zip(block.item_ids.tolist(), block.coeff.tolist())):
                    key = (users[r], i)
                    out[key] = out.get(key, 0.0) + c
            else:
                ids = block.item_ids.tolist()
                for r in range(block.coeff.shape[0]):
                    row = block.coeff[r]
                    for c in np.nonzero(row)[0]:
                        key = (users[r], ids[c])
                        out[key] = out.get(key, 0.0) + float(row[c])
        return out


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    mx = x.max(axis=1)
    return np.log(np.exp(x - mx[:, None]).sum(axis=1)) + mx


def _positive_reprs(model, pos_items: np.ndarray, encoded: Optional[EncodedCandidates]):
    if encoded is not None:
        if not np.array_equal(encoded.ids, pos_items):
            raise ValueError("encoded positives are not aligned with pos_items")
        return encoded.reprs, encoded.trace
    return model.item_reprs(pos_items)


def full_softmax_loss(model, users, pos_items) -> LossBatchOutput:
    """Exact softmax NLL over the whole item corpus (oracle scale only)."""
    n = model.num_items
    if n > FULL_SOFTMAX_MAX_ITEMS:
        raise OracleScaleError(f"full softmax over {n} items exceeds the oracle guard")
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    b = users.size

    q = model.query_repr(users)
    all_ids = np.arange(n, dtype=np.int64)
    reprs, trace = model.item_reprs(all_ids)
    scores = q @ reprs.T
    log_z = _logsumexp_rows(scores)
    sp = scores[np.arange(b), pos_items]
    loss = float(np.mean(log_z - sp))

    soft = np.exp(scores - log_z[:, None])
    blocks = [
        ScoreGradBlock(all_ids, soft / b, reprs, trace=trace),
        ScoreGradBlock(
            pos_items,
            np.full(b, -1.0 / b),
            reprs[pos_items],
            per_row=True,
            trace=trace.gather(pos_items) if trace is not None else None,
        ),
    ]
    return LossBatchOutput(loss, users, q, blocks)


def sampled_softmax_loss(
    model,
    users,
    pos_items,
    negatives,
    neg_log_proposal,
    pos_log_proposal,
    pos_encoded: Optional[EncodedCandidates] = None,
    neg_encoded: Optional[EncodedCandidates] = None,
) -> LossBatchOutput:
    """Sampled softmax NLL with proposal-corrected logits.

    The candidate list is shared across the batch (in-batch sharing); every
    logit, the positive's included, is corrected to s(u, i) - log q(i) with
    q the per-candidate proposal probability.  Serves every static-proposal
    baseline by swapping the proposal vector.
    """
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 1:
        raise ValueError("negatives must be a shared 1-D candidate list")
    neg_log_proposal = np.asarray(neg_log_proposal, dtype=np.float64)
    pos_log_proposal = np.asarray(pos_log_proposal, dtype=np.float64)
    if not (np.isfinite(neg_log_proposal).all() and np.isfinite(pos_log_proposal).all()):
        raise ValueError("log proposals must be finite; smooth the proposal distribution")
    b = users.size

    q = model.query_repr(users)
    pos_reprs, pos_trace = _positive_reprs(model, pos_items, pos_encoded)
    if neg_encoded is not None:
        if not np.array_equal(neg_encoded.ids, negatives):
            raise ValueError("encoded negatives are not aligned with the candidate list")
        neg_reprs, neg_trace = neg_encoded.reprs, neg_encoded.trace
    else:
        neg_reprs, neg_trace = model.item_reprs(negatives)

    corr = q @ neg_reprs.T - neg_log_proposal[None, :]
    corr_pos = np.einsum("ij,ij->i", q, pos_reprs) - pos_log_proposal
    mx = np.maximum(corr.max(axis=1), corr_pos)
    exp_neg = np.exp(corr - mx[:, None])
    exp_pos = np.exp(corr_pos - mx)
    log_d = np.log(exp_pos + exp_neg.sum(axis=1)) + mx
    loss = float(np.mean(log_d - corr_pos))

    # exp(corr - log_d) reuses exp_neg: exp_neg * exp(mx - log_d)
    scale = np.exp(mx - log_d) / b
    exp_neg *= scale[:, None]
    blocks = [
        ScoreGradBlock(negatives, exp_neg, neg_reprs, trace=neg_trace),
        ScoreGradBlock(
            pos_items,
            exp_pos * scale - 1.0 / b,
            pos_reprs,
            per_row=True,
            trace=pos_trace,
        ),
    ]
    return LossBatchOutput(loss, users, q, blocks)


def _stacked_sets(sets: Sequence[ResampleSet], attr: str) -> Optional[np.ndarray]:
    arrays = [getattr(rs, attr) for rs in sets]
    if any(a is None for a in arrays):
        return None
    sizes = {a.size for a in arrays}
    if len(sizes) != 1:
        raise ValueError("resampled sets must share one sample count")
    return np.stack(arrays)


def _resampled_nll(model, users, pos_items, sets, q, pos_reprs, cand_encoded, scores=None):
    """Mean NLL with an uncorrected resampled-denominator, plus coefficients.

    Resampled scores enter raw: the proposal correction already happened in
    the resampling weights, so no per-candidate correction is applied here.
    Duplicate draws count with their multiplicity.
    """
    b = users.size
    if len(sets) != b:
        raise ValueError("one resampled set per pair is required")
    if isinstance(sets, ResampleBatch):
        if sets.sample_count == 0:
            raise ValueError("resampled sets must be non-empty")
    elif any(len(rs) == 0 for rs in sets):
        raise ValueError("resampled sets must be non-empty")

    if (
        isinstance(sets, ResampleBatch)
        and cand_encoded is not None
        and np.array_equal(sets.candidate_items, cand_encoded.ids)
    ):
        # counts came straight from the sampler; no draw re-aggregation
        cand_ids = sets.candidate_items
        cand_reprs, trace = cand_encoded.reprs, cand_encoded.trace
        counts = sets.counts.astype(np.float64)
    else:
        positions = _stacked_sets(sets, "positions")
        if cand_encoded is not None and positions is not None:
            cand_ids = np.asarray(cand_encoded.ids, dtype=np.int64)
            cand_reprs, trace = cand_encoded.reprs, cand_encoded.trace
            if positions.max() >= cand_ids.size:
                raise ValueError("resample positions exceed the encoded candidate list")
            cols = positions
        else:
            ids_matrix = _stacked_sets(sets, "items")
            cand_ids = np.unique(ids_matrix)
            cand_reprs, trace = model.item_reprs(cand_ids)
            cols = np.searchsorted(cand_ids, ids_matrix)
        n = cand_ids.size
        flat = (cols + (np.arange(b, dtype=np.int64) * n)[:, None]).ravel()
        counts = np.bincount(flat, minlength=b * n).reshape(b, n).astype(np.float64)
        scores = None  # precomputed scores are only trusted on the fast path

    if scores is None:
        scores = q @ cand_reprs.T
    elif scores.shape != (b, cand_ids.size):
        raise ValueError("precomputed score matrix shape mismatch")
    sp = np.einsum("ij,ij->i", q, pos_reprs)
    mx = np.maximum(scores.max(axis=1), sp)
    exp_s = np.exp(scores - mx[:, None])
    denom = np.exp(sp - mx) + (counts * exp_s).sum(axis=1)
    log_d = np.log(denom) + mx
    loss = float(np.mean(log_d - sp))

    # exp(scores - log_d) reuses exp_s: exp_s * exp(mx - log_d)
    counts *= exp_s
    counts *= (np.exp(mx - log_d) / b)[:, None]
    coeff_pos = (np.exp(sp - log_d) - 1.0) / b
    return loss, ScoreGradBlock(cand_ids, counts, cand_reprs, trace=trace), coeff_pos


def bir_loss(
    model,
    users,
    pos_items,
    resampled: Sequence[ResampleSet],
    pos_encoded: Optional[EncodedCandidates] = None,
    cand_encoded: Optional[EncodedCandidates] = None,
    scores: Optional[np.ndarray] = None,
) -> LossBatchOutput:
    """NLL of each positive against its own resampled negatives."""
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    q = model.query_repr(users)
    pos_reprs, pos_trace = _positive_reprs(model, pos_items, pos_encoded)
    loss, block, coeff_pos = _resampled_nll(
        model, users, pos_items, resampled, q, pos_reprs, cand_encoded, scores
    )
    blocks = [
        block,
        ScoreGradBlock(pos_items, coeff_pos, pos_reprs, per_row=True, trace=pos_trace),
    ]
    return LossBatchOutput(loss, users, q, blocks)


def xir_loss(
    model,
    users,
    pos_items,
    batch_resampled: Sequence[ResampleSet],
    cache_resampled: Sequence[ResampleSet],
    lam: float,
    pos_encoded: Optional[EncodedCandidates] = None,
    batch_encoded: Optional[EncodedCandidates] = None,
    cache_encoded: Optional[EncodedCandidates] = None,
) -> LossBatchOutput:
    """Convex combination of cache-side and batch-side resampled NLLs.

    loss = lam * L(cache sets) + (1 - lam) * L(batch sets).  A zero-weight
    side is skipped outright, so lam = 0 reproduces bir_loss exactly and
    lam = 1 trains on the cache alone.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    q = model.query_repr(users)
    pos_reprs, pos_trace = _positive_reprs(model, pos_items, pos_encoded)

    loss = 0.0
    blocks: list[ScoreGradBlock] = []
    coeff_pos = np.zeros(users.size)
    for weight, sets, encoded in (
        (1.0 - lam, batch_resampled, batch_encoded),
        (lam, cache_resampled, cache_encoded),
    ):
        if weight == 0.0:
            continue
        term, block, term_pos = _resampled_nll(model, users, pos_items, sets, q, pos_reprs, encoded)
        loss += weight * term
        block.coeff = weight * block.coeff
        blocks.append(block)
        coeff_pos = coeff_pos + weight * term_pos
    blocks.append(ScoreGradBlock(pos_items, coeff_pos, pos_reprs, per_row=True, trace=pos_trace))
    return LossBatchOutput(float(loss), users, q, blocks)


# -- backward ----------------------------------------------------------------


def param_grads(model, out: LossBatchOutput) -> dict:
    """Fold coefficient blocks into {param name: (rows, grads) | dense}.

    Row lists are deduplicated, so the result feeds ``adam_step`` directly.
    """
    d_query = np.zeros_like(out.query_reprs)
    pieces: dict[str, list] = {}
    dense: dict[str, np.ndarray] = {}
    for block in out.blocks:
        if block.per_row:
            d_query += block.coeff[:, None] * block.item_reprs
            upstream = block.coeff[:, None] * out.query_reprs
        else:
            d_query += block.coeff @ block.item_reprs
            upstream = block.coeff.T @ out.query_reprs
        for name, g in model.backward_items(block.item_ids, block.trace, upstream).items():
            if isinstance(g, tuple):
                pieces.setdefault(name, []).append(g)
            else:
                dense[name] = dense.get(name, 0.0) + g

    grads: dict = dict(dense)
    uu, inv = np.unique(out.users, return_inverse=True)
    qg = np.zeros((uu.size, d_query.shape[1]))
    np.add.at(qg, inv, d_query)
    grads["query_emb"] = (uu, qg)

    for name, parts in pieces.items():
        rows = np.concatenate([p[0] for p in parts])
        vals = np.concatenate([p[1] for p in parts])
        ur, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((ur.size, vals.shape[1]))
        np.add.at(acc, inv, vals)
        grads[name] = (ur, acc)
    return grads


def dense_param_grads(model, out: LossBatchOutput) -> dict[str, np.ndarray]:
    """Same gradients as ``param_grads`` but as dense arrays (for checks)."""
    dense = {name: np.zeros_like(p) for name, p in model.params().items()}
    for name, g in param_grads(model, out).items():
        if isinstance(g, tuple):
            rows, vals = g
            dense[name][rows] += vals
        else:
            dense[name] += g
    return dense
