"""Two-tower scoring model: embedding tables, optional item MLP, Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file cannot be parsed."""


@dataclass(frozen=True)
class MlpTowerSpec:
    """Fully-connected item tower: hidden widths ending in the output width.

    The last width must equal the model embedding dimension so query and
    item representations live in the same space.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if not self.layer_widths or any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation}")


@dataclass
class TowerTrace:
    """Per-layer inputs kept from a forward pass for the backward pass."""

    layer_inputs: list[np.ndarray]  # [x, h1, ..., h_{L-1}], post-activation

    def gather(self, rows: np.ndarray) -> "TowerTrace":
        return TowerTrace([a[rows] for a in self.layer_inputs])


class MlpTower:
    """ReLU MLP with no activation after the final layer.

    Weights are stored as (in, out) matrices so forward is x @ W + b.
    """

    def __init__(self, input_width: int, spec: MlpTowerSpec, rng: np.random.Generator):
        self.spec = spec
        self.input_width = int(input_width)
        widths = [self.input_width, *spec.layer_widths]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def output_width(self) -> int:
        return self.spec.layer_widths[-1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, TowerTrace]:
        if x.shape[1] != self.input_width:
            raise ValueError(f"tower expects width {self.input_width}, got {x.shape[1]}")
        inputs = [x]
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l != last:
                h = np.maximum(h, 0.0)
                inputs.append(h)
        return h, TowerTrace(inputs)

    def backward(self, trace: TowerTrace, upstream: np.ndarray):
        """Gradients of sum(upstream * forward(x)) w.r.t. weights and x.

        Returns ([(dW, db), ...] in layer order, d_input).
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        delta = upstream
        for l in range(len(self.weights) - 1, -1, -1):
            x_l = trace.layer_inputs[l]
            grads[l] = (x_l.T @ delta, delta.sum(axis=0))
            delta = delta @ self.weights[l].T
            if l > 0:
                # post-activation output > 0 iff the pre-activation was > 0
                delta = delta * (trace.layer_inputs[l] > 0.0)
        return grads, delta


def tower_forward_backward(tower: MlpTower, inputs: np.ndarray, upstream_grad: np.ndarray):
    """Run the tower forward and backward in one call.

    Returns (outputs, [(dW, db), ...], input_grads).
    """
    out, trace = tower.forward(inputs)
    if upstream_grad.shape != out.shape:
        raise ValueError(f"upstream grad shape {upstream_grad.shape} != output {out.shape}")
    param_grads, d_in = tower.backward(trace, upstream_grad)
    return out, param_grads, d_in


class TwoTowerModel:
    """Query and item embedding tables with an optional item-side MLP.

    score(u, i) is the inner product of the final query and item
    representations.  Without a tower, item representations are embedding
    rows.  With a tower, the per-item input is the item id embedding
    concatenated with one embedding per categorical feature column, pushed
    through the MLP.
    """

    def __init__(
        self,
        query_emb: np.ndarray,
        item_emb: np.ndarray,
        tower: Optional[MlpTower] = None,
        feature_tables: Optional[list[np.ndarray]] = None,
        item_features: Optional[np.ndarray] = None,
    ):
        self.query_emb = query_emb
        self.item_emb = item_emb
        self.tower = tower
        self.feature_tables = feature_tables or []
        self.item_features = item_features
        self.item_encode_count = 0

        if tower is not None:
            k = tower.output_width
            if query_emb.shape[1] != k:
                raise ValueError("query embedding width must equal tower output width")
            if item_features is None and self.feature_tables:
                raise ValueError("feature tables given without an item feature matrix")
        elif query_emb.shape[1] != item_emb.shape[1]:
            raise ValueError("query and item embedding widths differ")

    # -- construction ---------------------------------------------------

    @classmethod
    def create(
        cls,
        num_users: int,
        num_items: int,
        k: int,
        rng: np.random.Generator,
        tower_spec: Optional[MlpTowerSpec] = None,
        item_features: Optional[np.ndarray] = None,
        feature_vocab_sizes: Optional[list[int]] = None,
        id_dim: Optional[int] = None,
    ) -> "TwoTowerModel":
        if tower_spec is not None and tower_spec.layer_widths[-1] != k:
            raise ValueError(
                f"tower output width {tower_spec.layer_widths[-1]} != embedding dim {k}"
            )
        query = rng.uniform(-1.0, 1.0, size=(num_users, k)) / np.sqrt(k)
        if tower_spec is None:
            item = rng.uniform(-1.0, 1.0, size=(num_items, k)) / np.sqrt(k)
            return cls(query, item)

        d_id = id_dim or k
        item = rng.uniform(-1.0, 1.0, size=(num_items, d_id)) / np.sqrt(d_id)
        tables = []
        if feature_vocab_sizes:
            if item_features is None:
                raise ValueError("feature vocab sizes given without item features")
            item_features = np.asarray(item_features, dtype=np.int64)
            if item_features.shape != (num_items, len(feature_vocab_sizes)):
                raise ValueError("item feature matrix shape mismatch")
            for v in feature_vocab_sizes:
                tables.append(rng.uniform(-1.0, 1.0, size=(v, d_id)) / np.sqrt(d_id))
        input_width = d_id * (1 + len(tables))
        tower = MlpTower(input_width, tower_spec, rng)
        return cls(query, item, tower=tower, feature_tables=tables, item_features=item_features)

    # -- dimensions and parameters ---------------------------------------

    @property
    def num_users(self) -> int:
        return self.query_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def k(self) -> int:
        return self.query_emb.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays in a fixed declaration order."""
        out = {"query_emb": self.query_emb, "item_emb": self.item_emb}
        for f, table in enumerate(self.feature_tables):
            out[f"feat_emb_{f}"] = table
        if self.tower is not None:
            for l, (w, b) in enumerate(zip(self.tower.weights, self.tower.biases)):
                out[f"tower_w{l}"] = w
                out[f"tower_b{l}"] = b
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params().values())

    # -- representations --------------------------------------------------

    def query_repr(self, users: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of range")
        return self.query_emb[users]

    def _tower_input(self, items: np.ndarray) -> np.ndarray:
        parts = [self.item_emb[items]]
        for f, table in enumerate(self.feature_tables):
            parts.append(table[self.item_features[items, f]])
        return np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]

    def item_reprs(self, items: np.ndarray, record: bool = False):
        """Item representations plus the trace needed for backward.

        ``record=True`` counts the call against the encode counter; the
        training loop records once per batch/cache so the counter reflects
        how many items actually pass through the item tower per step.
        """
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range")
        if record:
            self.item_encode_count += items.size
        if self.tower is None:
            return self.item_emb[items], None
        x = self._tower_input(items)
        return self.tower.forward(x)

    def encode_items(self, items: np.ndarray):
        return self.item_reprs(items, record=True)

    def backward_items(self, items: np.ndarray, trace, upstream: np.ndarray) -> dict:
        """Push d(loss)/d(item repr) down to table rows and tower weights.

        Returns the same {name: (rows, row_grads) | dense} structure
        ``adam_step`` consumes.  Rows are not deduplicated here; callers
        accumulate across blocks and deduplicate once.
        """
        grads: dict = {}
        if self.tower is None:
            grads["item_emb"] = (items, upstream)
            return grads
        param_grads, d_in = self.tower.backward(trace, upstream)
        for l, (dw, db) in enumerate(param_grads):
            grads[f"tower_w{l}"] = dw
            grads[f"tower_b{l}"] = db
        d_id = self.item_emb.shape[1]
        grads["item_emb"] = (items, d_in[:, :d_id])
        for f in range(len(self.feature_tables)):
            cols = slice(d_id * (1 + f), d_id * (2 + f))
            grads[f"feat_emb_{f}"] = (self.item_features[items, f], d_in[:, cols])
        return grads


def score_batch(model: TwoTowerModel, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Similarity matrix S[a, b] = <repr(u_a), repr(i_b)>."""
    q = model.query_repr(users)
    reprs, _ = model.item_reprs(items)
    return q @ reprs.T


# -- optimizer -------------------------------------------------------------


class AdamState:
    """Adam moments plus the run's learning-rate schedule constants.

    Embedding tables are updated sparsely: only rows touched by the step move,
    and their moments are the only ones advanced (lazy variant).  L2 weight
    decay is added into the gradient of touched rows before the moment update.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lr_decay: tuple[float, int] = (0.95, 5),
    ):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_decay = (float(lr_decay[0]), int(lr_decay[1]))
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        self.second_moment = {k: np.zeros_like(v) for k, v in params.items()}

    def effective_lr(self, epoch: int) -> float:
        """Step size used during 1-based ``epoch`` under the decay schedule."""
        factor, every = self.lr_decay
        return self.learning_rate * factor ** ((max(epoch, 1) - 1) // every)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict, lr: Optional[float] = None):
    """One bias-corrected Adam update over the given gradients.

    ``grads`` maps parameter names to either a dense array or a
    (rows, row_grads) pair with unique rows.  Raises NonFiniteGradientError
    on any non-finite gradient entry.
    """
    if lr is None:
        lr = state.learning_rate
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t

    for name, g in grads.items():
        if isinstance(g, tuple):
            rows, grad = g
        else:
            rows, grad = None, g
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name} at step {t}")
        p = params[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        if rows is None:
            gd = grad + state.weight_decay * p
            m[...] = b1 * m + (1.0 - b1) * gd
            v[...] = b2 * v + (1.0 - b2) * gd * gd
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        else:
            gd = grad + state.weight_decay * p[rows]
            mr = b1 * m[rows] + (1.0 - b1) * gd
            vr = b2 * v[rows] + (1.0 - b2) * gd * gd
            m[rows] = mr
            v[rows] = vr
            p[rows] -= lr * (mr / bc1) / (np.sqrt(vr / bc2) + state.eps)


# -- checkpointing -----------------------------------------------------------

_MAGIC = "TTM v1"


def _tower_token(model: TwoTowerModel) -> str:
    if model.tower is None:
        return "none"
    widths = "-".join(str(w) for w in model.tower.spec.layer_widths)
    feats = ",".join(str(t.shape[0]) for t in model.feature_tables)
    return f"{model.tower.spec.activation}:{widths};id={model.item_emb.shape[1]};feats={feats}"


def save_checkpoint(model: TwoTowerModel, path) -> None:
    """Write the header line plus little-endian float32 parameter blocks."""
    path = Path(path)
    header = f"{_MAGIC} {model.num_users} {model.num_items} {model.k} {_tower_token(model)}\n"
    with path.open("wb") as fh:
        fh.write(header.encode("ascii"))
        for arr in model.params().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _parse_header(header: str):
    parts = header.split(" ")
    if len(parts) != 6 or parts[0] != "TTM" or parts[1] != "v1":
        raise CheckpointFormatError(f"bad header {header!r}")
    try:
        return int(parts[2]), int(parts[3]), int(parts[4]), parts[5]
    except ValueError as exc:
        raise CheckpointFormatError(f"bad header {header!r}") from exc


def _parse_tower_token(token: str, k: int):
    """Decode the header's tower description into (spec, id_dim, vocab_sizes)."""
    if token == "none":
        return None, None, []
    try:
        act_widths, id_part, feat_part = token.split(";")
        activation, widths_s = act_widths.split(":")
        widths = tuple(int(w) for w in widths_s.split("-"))
        id_dim = int(id_part.removeprefix("id="))
        feats_s = feat_part.removeprefix("feats=")
        vocab_sizes = [int(v) for v in feats_s.split(",")] if feats_s else []
    except (ValueError, AttributeError) as exc:
        raise CheckpointFormatError(f"bad tower token {token!r}") from exc
    return MlpTowerSpec(widths, activation), id_dim, vocab_sizes


def load_checkpoint(path, item_features: Optional[np.ndarray] = None) -> TwoTowerModel:
    """Rebuild a model from ``save_checkpoint`` output.

    Parameter values round-trip bit-exactly through the float32 blocks.
    Models with feature tables need the item feature matrix re-supplied,
    since the checkpoint holds parameters only.
    """
    path = Path(path)
    with path.open("rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        m_users, n_items, k, tower_token = _parse_header(header)
        spec, id_dim, vocab_sizes = _parse_tower_token(tower_token, k)

        if spec is not None and vocab_sizes:
            if item_features is None:
                raise CheckpointFormatError(
                    f"{path}: checkpoint has feature tables; item_features required"
                )
            item_features = np.asarray(item_features, dtype=np.int64)

        rng = np.random.default_rng(0)  # shapes only; every block is overwritten
        model = TwoTowerModel.create(
            m_users,
            n_items,
            k,
            rng,
            tower_spec=spec,
            item_features=item_features if vocab_sizes else None,
            feature_vocab_sizes=vocab_sizes or None,
            id_dim=id_dim,
        )
        for name, arr in model.params().items():
            raw = fh.read(arr.size * 4)
            if len(raw) != arr.size * 4:
                raise CheckpointFormatError(f"{path}: truncated block {name!r}")
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after last block")
    return model
