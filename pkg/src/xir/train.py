"""Run configuration and the training loop for all six methods."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import InteractionStore, compute_popularity
from .diagnostics import evaluate_model
from .losses import EncodedCandidates, bir_loss, param_grads, sampled_softmax_loss, xir_loss
from .model import (
    AdamState,
    MlpTowerSpec,
    NonFiniteGradientError,
    TwoTowerModel,
    adam_step,
    save_checkpoint,
)
from .samplers import (
    SampleCache,
    StreamFreqEstimator,
    bir_resample,
    cache_resample,
    mns_candidates,
    save_occurrence,
    stream_freq_update_and_estimate,
    update_occurrence_and_cache,
)

METHODS = ("ssl", "ssl_pop", "mns", "gtower", "bir", "xir")


class TrainingAbortedError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


@dataclass
class RunConfig:
    method: str = "ssl_pop"
    batch_size: int = 2048
    embedding_dim: int = 32
    learning_rate: float = 0.001
    lr_decay: tuple[float, int] = (0.95, 5)
    weight_decay: float = 1e-5
    epochs: int = 100
    lambda_cache: float = 0.5
    cache_size: Optional[int] = None
    resample_size: Optional[int] = None
    mns_b_prime: Optional[int] = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_cutoffs: tuple[int, ...] = (10, 20)
    eval_every: int = 5
    pop_epsilon: float = 1.0
    tower: Optional[MlpTowerSpec] = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("batch_size", "embedding_dim", "epochs", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0 or self.pop_epsilon < 0:
            raise ValueError("weight_decay and pop_epsilon must be non-negative")
        if not 0.0 <= self.lambda_cache <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        for name in ("cache_size", "resample_size"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive when set")
        if self.mns_b_prime is not None and self.mns_b_prime < 0:
            raise ValueError("mns_b_prime must be non-negative")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.eval_cutoffs or any(k < 1 for k in self.eval_cutoffs):
            raise ValueError("eval_cutoffs must be positive")
        if self.lr_decay[0] <= 0 or self.lr_decay[1] < 1:
            raise ValueError("lr_decay must be (positive factor, epochs >= 1)")

    # method-dependent defaults
    def resolved_resample_size(self) -> int:
        if self.resample_size is not None:
            return self.resample_size
        return self.batch_size // 2 if self.method == "xir" else self.batch_size

    def resolved_cache_size(self) -> int:
        return self.cache_size if self.cache_size is not None else self.batch_size

    def resolved_b_prime(self) -> int:
        return self.mns_b_prime if self.mns_b_prime is not None else self.batch_size

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "batch_size": self.batch_size,
            "embedding_dim": self.embedding_dim,
            "learning_rate": self.learning_rate,
            "lr_decay": list(self.lr_decay),
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "lambda": self.lambda_cache,
            "cache_size": self.cache_size,
            "resample_size": self.resample_size,
            "mns_b_prime": self.mns_b_prime,
            "seeds": list(self.seeds),
            "eval_cutoffs": list(self.eval_cutoffs),
            "eval_every": self.eval_every,
            "pop_epsilon": self.pop_epsilon,
            "tower": None
            if self.tower is None
            else {"layer_widths": list(self.tower.layer_widths), "activation": self.tower.activation},
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_cache"] = d.pop("lambda")
        tower = d.get("tower")
        if isinstance(tower, dict):
            d["tower"] = MlpTowerSpec(tuple(tower["layer_widths"]), tower.get("activation", "relu"))
        if "lr_decay" in d and d["lr_decay"] is not None:
            d["lr_decay"] = (float(d["lr_decay"][0]), int(d["lr_decay"][1]))
        for name in ("seeds", "eval_cutoffs"):
            if name in d and d[name] is not None:
                d[name] = tuple(d[name])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    ndcg: Optional[dict] = None
    recall: Optional[dict] = None
    wall_seconds: float = 0.0
    gradient_wall_seconds: float = 0.0

    def to_json_line(self) -> str:
        """Deterministic metrics line; identical runs produce identical bytes."""
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "ndcg": self.ndcg,
                "recall": self.recall,
            },
            sort_keys=True,
        )

    def to_timing_line(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "wall_seconds": self.wall_seconds,
                "gradient_wall_seconds": self.gradient_wall_seconds,
            },
            sort_keys=True,
        )


@dataclass
class TrainResult:
    records: list[EpochRecord]
    model: TwoTowerModel
    checkpoint_path: Optional[Path]
    final_metrics: Optional[dict]
    seed: int


# fixed stream ids so every random purpose draws from its own generator;
# methods sharing a purpose (e.g. batch resampling) then see identical draws
# under identical seeds, which the mixture-limit equivalences rely on
_S_MODEL, _S_SHUFFLE, _S_BATCH, _S_CACHE, _S_REFRESH, _S_MNS, _S_CACHE_INIT, _S_GTOWER = range(8)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in key]])


def train_run(
    config: RunConfig,
    train_store: InteractionStore,
    test_store: InteractionStore,
    seed: int,
    out_dir: Optional[Path] = None,
    item_features: Optional[np.ndarray] = None,
    feature_vocab_sizes: Optional[list[int]] = None,
    log_lines: Optional[list] = None,
) -> TrainResult:
    """Train one seed of one configuration and evaluate periodically.

    Writes per-epoch JSON records (and checkpoints at evaluation points) to
    ``out_dir`` when given.  Raises TrainingAbortedError on a non-finite
    loss or gradient, leaving the last evaluated checkpoint in place.
    """
    config.validate()
    method = config.method
    n_pairs = len(train_store)
    if n_pairs == 0:
        raise ValueError("training split is empty")
    num_items = train_store.num_items

    pop = compute_popularity(train_store, config.pop_epsilon)
    model = TwoTowerModel.create(
        train_store.num_users,
        num_items,
        config.embedding_dim,
        _rng(seed, _S_MODEL),
        tower_spec=config.tower,
        item_features=item_features,
        feature_vocab_sizes=feature_vocab_sizes,
    )
    adam = AdamState(
        model.params(),
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        lr_decay=config.lr_decay,
    )

    cache = None
    estimator = None
    if method == "xir":
        cache = SampleCache.create(num_items, config.resolved_cache_size(), _rng(seed, _S_CACHE_INIT))
    elif method == "gtower":
        estimator = StreamFreqEstimator(num_items, seed=[seed, _S_GTOWER])

    m_resample = config.resolved_resample_size()
    b_prime = config.resolved_b_prime()
    uniform_logq = -np.log(num_items)
    ckpt_path = Path(out_dir) / f"checkpoint_seed{seed}.ttm" if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out_dir is not None:
        metrics_fh = (Path(out_dir) / f"metrics_seed{seed}.jsonl").open("w", encoding="utf-8")
        timing_fh = (Path(out_dir) / f"timings_seed{seed}.jsonl").open("w", encoding="utf-8")

    users_all, items_all = train_store.users, train_store.items
    records: list[EpochRecord] = []
    final_metrics = None
    try:
        for epoch in range(1, config.epochs + 1):
            lr = adam.effective_lr(epoch)
            order = _rng(seed, _S_SHUFFLE, epoch).permutation(n_pairs)
            t_epoch = time.perf_counter()
            grad_seconds = 0.0
            loss_sum = 0.0

            for step, lo in enumerate(range(0, n_pairs, config.batch_size)):
                idx = order[lo : lo + config.batch_size]
                users = users_all[idx]
                pos = items_all[idx]
                b = users.size

                # item encoding is deliberately outside the gradient timer
                reprs, trace = model.encode_items(pos)
                batch_enc = EncodedCandidates(pos, reprs, trace)
                extra_enc = None
                cache_enc = None
                if method == "mns":
                    extra_ids = _rng(seed, _S_MNS, epoch, step).integers(
                        0, num_items, size=b_prime, dtype=np.int64
                    )
                    extra_enc = EncodedCandidates(extra_ids, *model.encode_items(extra_ids))
                elif method == "xir":
                    cache_enc = EncodedCandidates(cache.items, *model.encode_items(cache.items))

                t0 = time.perf_counter()
                out = _step_loss(
                    method, config, model, pop, users, pos, batch_enc, extra_enc, cache_enc,
                    cache, estimator, m_resample, uniform_logq, seed, epoch, step,
                )
                if not np.isfinite(out.loss):
                    raise TrainingAbortedError(f"non-finite loss at epoch {epoch} step {step}")
                grads = param_grads(model, out)
                grad_seconds += time.perf_counter() - t0

                try:
                    adam_step(adam, model.params(), grads, lr=lr)
                except NonFiniteGradientError as exc:
                    raise TrainingAbortedError(str(exc)) from exc
                loss_sum += out.loss * b

            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n_pairs,
                wall_seconds=time.perf_counter() - t_epoch,
                gradient_wall_seconds=grad_seconds,
            )
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                metrics = evaluate_model(model, train_store, test_store, config.eval_cutoffs)
                record.ndcg = {str(k): v for k, v in metrics["ndcg"].items()}
                record.recall = {str(k): v for k, v in metrics["recall"].items()}
                final_metrics = metrics
                if ckpt_path is not None:
                    save_checkpoint(model, ckpt_path)
            records.append(record)
            line = record.to_json_line()
            if metrics_fh is not None:
                metrics_fh.write(line + "\n")
                metrics_fh.flush()
                timing_fh.write(record.to_timing_line() + "\n")
            if log_lines is not None:
                log_lines.append(line)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()

    if out_dir is not None and method == "xir":
        save_occurrence(cache, Path(out_dir) / f"occurrence_seed{seed}.tsv")
    return TrainResult(records, model, ckpt_path, final_metrics, seed)


def _step_loss(
    method, config, model, pop, users, pos, batch_enc, extra_enc, cache_enc,
    cache, estimator, m_resample, uniform_logq, seed, epoch, step,
):
    """Dispatch one mini-batch through its method's sampler and loss."""
    b = users.size

    if method == "ssl":
        logq = np.full(b, uniform_logq)
        return sampled_softmax_loss(
            model, users, pos, pos, logq, logq, pos_encoded=batch_enc, neg_encoded=batch_enc
        )
    if method == "ssl_pop":
        logq = pop.log_prob[pos]
        return sampled_softmax_loss(
            model, users, pos, pos, logq, logq, pos_encoded=batch_enc, neg_encoded=batch_enc
        )
    if method == "mns":
        candidates, log_q = mns_candidates(
            pos, extra_enc.ids.size, pop, None, uniform_ids=extra_enc.ids
        )
        cand_enc = _concat_encoded(batch_enc, extra_enc)
        return sampled_softmax_loss(
            model, users, pos, candidates, log_q, log_q[:b],
            pos_encoded=batch_enc, neg_encoded=cand_enc,
        )
    if method == "gtower":
        est = stream_freq_update_and_estimate(estimator, pos)
        logq = np.log(est)
        return sampled_softmax_loss(
            model, users, pos, pos, logq, logq, pos_encoded=batch_enc, neg_encoded=batch_enc
        )
    if method == "bir":
        scores = model.query_repr(users) @ batch_enc.reprs.T
        sets = bir_resample(scores, pos, pop, m_resample, _rng(seed, _S_BATCH, epoch, step))
        return bir_loss(model, users, pos, sets, pos_encoded=batch_enc, cand_encoded=batch_enc)
    if method == "xir":
        q = model.query_repr(users)
        scores = q @ batch_enc.reprs.T
        cache_scores = q @ cache_enc.reprs.T
        batch_sets = bir_resample(scores, pos, pop, m_resample, _rng(seed, _S_BATCH, epoch, step))
        cache_sets = cache_resample(
            cache_scores, cache, pop, m_resample, _rng(seed, _S_CACHE, epoch, step)
        )
        update_occurrence_and_cache(
            cache, [*batch_sets, *cache_sets], _rng(seed, _S_REFRESH, epoch, step)
        )
        return xir_loss(
            model, users, pos, batch_sets, cache_sets, config.lambda_cache,
            pos_encoded=batch_enc, batch_encoded=batch_enc, cache_encoded=cache_enc,
        )
    raise ValueError(f"unknown method {method!r}")


def _concat_encoded(a: EncodedCandidates, b: EncodedCandidates) -> EncodedCandidates:
    if b.ids.size == 0:
        return EncodedCandidates(np.concatenate([a.ids, b.ids]), a.reprs, a.trace)
    reprs = np.concatenate([a.reprs, b.reprs])
    trace = None
    if a.trace is not None:
        from .model import TowerTrace

        trace = TowerTrace([np.concatenate([x, y]) for x, y in zip(a.trace.layer_inputs, b.trace.layer_inputs)])
    return EncodedCandidates(np.concatenate([a.ids, b.ids]), reprs, trace)
