"""Distributional checks, gradient-bias measurement, and ranking metrics.

The verification routines simulate the sampling pipeline against exact,
enumerable targets (uniform, full softmax, full-softmax gradients), so they
only run at oracle scale.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import InteractionStore, PopularityTable
from .losses import OracleScaleError
from .samplers import categorical_rows

ORACLE_MAX_ITEMS = 10_000


@dataclass
class DistributionReport:
    """How far an empirical distribution sits from its exact target."""

    tv_distance: float
    kl_divergence: float
    sample_count: int
    support_size: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BoundTerms:
    """Closed-form leading terms of the gradient-bias bound for one batch.

    Z is the full partition sum, Z_B its in-batch part, Z_Bp the
    popularity-corrected in-batch sum, G the largest observed score-gradient
    coordinate, and max_pop_gap the popularity spread within the batch.
    """

    Z: float
    Z_B: float
    Z_Bp: float
    lead_grad_term: float
    lead_const_term: float
    G: float
    max_pop_gap: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GradientBiasReport:
    """Monte-Carlo gradient bias of resampled negatives vs the exact softmax.

    ``coeff_bias[i]`` is the bias of item i's mean gradient coefficient
    (empirical resample frequency minus exact softmax probability); item
    embedding coordinates inherit it scaled by the query vector, and
    ``query_bias`` carries the bias projected onto the query gradient.
    """

    coeff_bias: np.ndarray
    coeff_stderr: np.ndarray
    query_bias: np.ndarray
    query_stderr: np.ndarray
    max_coord_bias: float
    max_coord_stderr: float
    trials: int
    batch_size: int
    resample_size: int
    bound_terms: BoundTerms

    def to_dict(self) -> dict:
        return {
            "max_coord_bias": self.max_coord_bias,
            "max_coord_stderr": self.max_coord_stderr,
            "max_coeff_bias": float(np.abs(self.coeff_bias).max()),
            "trials": self.trials,
            "batch_size": self.batch_size,
            "resample_size": self.resample_size,
            "bound_terms": self.bound_terms.to_dict(),
        }


def tv_and_kl(empirical: np.ndarray, exact: np.ndarray) -> DistributionReport:
    """Total variation and KL(empirical || exact) between two distributions."""
    p = np.asarray(empirical, dtype=np.float64)
    q = np.asarray(exact, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("distributions must be 1-D and equally long")
    for name, d in (("empirical", p), ("exact", q)):
        if abs(d.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} distribution sums to {d.sum()}, not 1")
    tv = 0.5 * float(np.abs(p - q).sum())
    mask = p > 0
    with np.errstate(divide="ignore"):
        kl = float((p[mask] * np.log(p[mask] / q[mask])).sum())
    return DistributionReport(tv, kl, sample_count=0, support_size=p.size)


def verify_lemma31(P: np.ndarray, draws: int, rng: np.random.Generator) -> DistributionReport:
    """Two-stage check: draw from P, resample with weight 1/p, expect uniform.

    Stage one draws a pool of ``draws`` items from P; stage two resamples
    ``draws`` items from the pool with per-item weight 1/p.  The empirical
    law of stage two is compared against the exact uniform distribution.
    """
    P = np.asarray(P, dtype=np.float64)
    if (P <= 0).any():
        raise ValueError("P must be strictly positive")
    P = P / P.sum()
    n = P.size
    pool = rng.multinomial(draws, P).astype(np.float64)
    weights = pool / P
    resampled = rng.multinomial(draws, weights / weights.sum())
    report = tv_and_kl(resampled / draws, np.full(n, 1.0 / n))
    report.sample_count = draws
    return report


def _pop_cdf(pop: PopularityTable) -> np.ndarray:
    cdf = np.cumsum(pop.prob)
    cdf[-1] = 1.0
    return cdf


def verify_theorem31(
    scores: np.ndarray,
    pop: PopularityTable,
    batch_sizes: Sequence[int],
    trials: int,
    rng: np.random.Generator,
    chunk_trials: int = 512,
) -> list[DistributionReport]:
    """Empirical law of resampled items vs the exact softmax, per batch size.

    Each trial draws a popularity-distributed batch, resamples one item with
    the popularity-corrected weights, and tallies it.  Larger batches should
    track the exact softmax more closely.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n > ORACLE_MAX_ITEMS:
        raise OracleScaleError(f"{n} items exceed the exact-softmax guard")
    exact = np.exp(scores - scores.max())
    exact /= exact.sum()
    cdf = _pop_cdf(pop)

    reports = []
    for b in batch_sizes:
        counts = np.zeros(n, dtype=np.int64)
        done = 0
        while done < trials:
            c = min(chunk_trials, trials - done)
            batch = np.searchsorted(cdf, rng.random((c, b)), side="right").astype(np.int64)
            log_w = scores[batch] - pop.log_prob[batch]
            picked = categorical_rows(log_w, 1, rng)[:, 0]
            counts += np.bincount(batch[np.arange(c), picked], minlength=n)
            done += c
        report = tv_and_kl(counts / trials, exact)
        report.sample_count = trials
        reports.append(report)
    return reports


def _bound_terms(scores, pop, batch, positive, query, item_embs) -> BoundTerms:
    """Evaluate the closed-form leading bound terms on one concrete batch."""
    exp_s = np.exp(scores)
    z = float(exp_s.sum())
    z_b = float(exp_s[batch].sum())
    z_bp = float((exp_s[batch] / pop.prob[batch]).sum())
    s_pop = float((exp_s[batch] * pop.prob[batch]).sum())
    b = batch.size
    lead_grad = (s_pop * z_bp - z_b * z_b) / (b * z**3)
    gap = float(pop.prob[batch].max() - pop.prob[batch].min())
    observed = np.append(batch, positive)
    g = max(float(np.abs(item_embs[observed]).max()), float(np.abs(query).max()))
    lead_const = (2.0 * g / b) * gap * z_bp * z_b / (z * z + s_pop * z_bp)
    return BoundTerms(z, z_b, z_bp, lead_grad, lead_const, g, gap)


def gradient_bias(
    model,
    user: int,
    positive: int,
    pop: PopularityTable,
    batch_size: int,
    trials: int,
    rng: np.random.Generator,
    resample_size: Optional[int] = None,
    forced_enumeration: bool = False,
    chunk_trials: int = 256,
) -> GradientBiasReport:
    """Bias of the resampled gradient estimate against the exact softmax.

    The resampled negatives estimate the softmax-expected score gradient as
    the plain mean over draws, so the estimate's gradient coefficient for
    item i is its resample frequency.  The deterministic positive term is
    shared with the exact gradient and cancels, leaving the bias fully
    described by mean resample frequencies minus exact softmax
    probabilities.  Bound terms come from the first sampled batch.

    ``forced_enumeration`` replaces the popularity-drawn batch with one exact
    corpus enumeration per trial (batch_size must equal the corpus size).
    """
    n = model.num_items
    if n > ORACLE_MAX_ITEMS:
        raise OracleScaleError(f"{n} items exceed the exact-gradient guard")
    if forced_enumeration and batch_size != n:
        raise ValueError("forced enumeration requires batch_size == num_items")
    m = resample_size or batch_size

    query = model.query_repr(np.array([user]))[0]
    item_embs, _ = model.item_reprs(np.arange(n))
    scores = item_embs @ query
    p_star = np.exp(scores - scores.max())
    p_star /= p_star.sum()
    cdf = _pop_cdf(pop)

    sum_c = np.zeros(n)
    sumsq_c = np.zeros(n)
    sum_q = np.zeros(model.k)
    sumsq_q = np.zeros(model.k)
    first_batch = None
    done = 0
    while done < trials:
        c = min(chunk_trials, trials - done)
        if forced_enumeration:
            batch = np.tile(np.arange(n, dtype=np.int64), (c, 1))
        else:
            batch = np.searchsorted(cdf, rng.random((c, batch_size)), side="right").astype(np.int64)
        if first_batch is None:
            first_batch = batch[0].copy()
        log_w = scores[batch] - pop.log_prob[batch]
        picked = categorical_rows(log_w, m, rng)
        drawn = np.take_along_axis(batch, picked, axis=1)
        flat = (drawn + (np.arange(c, dtype=np.int64) * n)[:, None]).ravel()
        freq = np.bincount(flat, minlength=c * n).reshape(c, n) / m
        sum_c += freq.sum(axis=0)
        sumsq_c += (freq * freq).sum(axis=0)
        g_q = freq @ item_embs
        sum_q += g_q.sum(axis=0)
        sumsq_q += (g_q * g_q).sum(axis=0)
        done += c

    mean_c = sum_c / trials
    var_c = np.maximum(sumsq_c / trials - mean_c**2, 0.0)
    coeff_bias = mean_c - p_star
    coeff_stderr = np.sqrt(var_c / trials)

    mean_q = sum_q / trials
    var_q = np.maximum(sumsq_q / trials - mean_q**2, 0.0)
    query_bias = mean_q - p_star @ item_embs
    query_stderr = np.sqrt(var_q / trials)

    q_scale = float(np.abs(query).max())
    max_coord_bias = max(float(np.abs(query_bias).max()), float(np.abs(coeff_bias).max()) * q_scale)
    max_coord_stderr = max(float(query_stderr.max()), float(coeff_stderr.max()) * q_scale)

    terms = _bound_terms(scores, pop, first_batch, positive, query, item_embs)
    return GradientBiasReport(
        coeff_bias=coeff_bias,
        coeff_stderr=coeff_stderr,
        query_bias=query_bias,
        query_stderr=query_stderr,
        max_coord_bias=max_coord_bias,
        max_coord_stderr=max_coord_stderr,
        trials=trials,
        batch_size=batch_size,
        resample_size=m,
        bound_terms=terms,
    )


# -- ranking metrics ----------------------------------------------------------


def ndcg_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    """Binary-relevance NDCG at cutoff k; the ranked list must be duplicate-free."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty; skip this user instead")
    dcg = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    idcg = 0.0
    for rank in range(1, min(k, len(relevant)) + 1):
        idcg += 1.0 / math.log2(rank + 1)
    return dcg / idcg


def recall_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty; skip this user instead")
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def evaluate_model(
    model,
    train: InteractionStore,
    test: InteractionStore,
    k_list: Sequence[int],
    user_chunk: int = 256,
) -> dict:
    """Full-ranking NDCG/Recall over test users, masking their train items.

    Scores every item for each test user, drops items the user already
    interacted with in training, and averages metrics over users that have a
    non-empty test set.
    """
    k_list = sorted(set(int(k) for k in k_list))
    k_max = k_list[-1]
    users = sorted(test.user_index)
    reprs, _ = model.item_reprs(np.arange(model.num_items))

    sums = {("ndcg", k): 0.0 for k in k_list}
    sums.update({("recall", k): 0.0 for k in k_list})
    evaluated = 0
    for lo in range(0, len(users), user_chunk):
        chunk = users[lo : lo + user_chunk]
        scores = model.query_repr(np.array(chunk, dtype=np.int64)) @ reprs.T
        for r, user in enumerate(chunk):
            seen = train.items_of(user)
            if seen.size:
                scores[r, seen] = -np.inf
            row = scores[r]
            top = np.argpartition(-row, min(k_max, row.size - 1))[:k_max]
            top = top[np.argsort(-row[top], kind="stable")]
            relevant = test.items_of(user)
            ranked = top.tolist()
            for k in k_list:
                sums[("ndcg", k)] += ndcg_at_k(ranked, relevant, k)
                sums[("recall", k)] += recall_at_k(ranked, relevant, k)
            evaluated += 1

    if evaluated == 0:
        raise ValueError("no test user has a non-empty item set")
    return {
        "ndcg": {k: sums[("ndcg", k)] / evaluated for k in k_list},
        "recall": {k: sums[("recall", k)] / evaluated for k in k_list},
        "users_evaluated": evaluated,
    }
