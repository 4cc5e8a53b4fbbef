"""Cross-validation plans, the minibatch training loop, metrics, and single-table baselines."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encode import NodeTypeEncoder, encode_node
from .models import build_batch
from .optim import AdamW
from .rdb import Database
from .sampler import Datapoint
from .tensor import (
    RngStream,
    Tensor,
    add,
    backward,
    cross_entropy,
    dropout,
    init_weight,
    matmul,
    relu,
)

__all__ = [
    "CvFold",
    "CvPlan",
    "make_cv_plan",
    "TrainConfig",
    "TrainResult",
    "train",
    "evaluate",
    "auroc",
    "accuracy",
    "relative_auroc",
    "positive_scores",
    "oversample_ids",
    "fold_encoder_rows",
    "GraphDataset",
    "TableDataset",
    "LinearModel",
    "MlpModel",
    "single_table_features",
    "baseline_logreg",
    "baseline_mlp",
]

EVAL_CHUNK = 512


@dataclass
class CvFold:
    train_ids: np.ndarray  # 80% block, shuffled order
    val_ids: np.ndarray  # leading 15% of the train block
    test_ids: np.ndarray

    @property
    def fit_ids(self) -> np.ndarray:
        return self.train_ids[len(self.val_ids):]


@dataclass
class CvPlan:
    folds: list[CvFold]
    n: int
    seed: int


def make_cv_plan(n: int, seed: int, n_folds: int = 5) -> CvPlan:
    """Split ids into n_folds test blocks (largest-remainder sizes) with val carved from each train block."""
    if n < 10:
        raise ValueError(f"need at least 10 ids for a cross-validation plan, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, extra = divmod(n, n_folds)
    sizes = [base + (1 if k < extra else 0) for k in range(n_folds)]
    bounds = np.cumsum([0] + sizes)
    folds = []
    for k in range(n_folds):
        test = perm[bounds[k]:bounds[k + 1]]
        train = np.concatenate([perm[:bounds[k]], perm[bounds[k + 1]:]])
        n_val = int(np.floor(0.15 * len(train) + 0.5))
        folds.append(CvFold(train, train[:n_val], test))
    return CvPlan(folds, n, seed)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float | None = None  # None means the model family default (0 here, 0.01 for baselines)
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    oversample: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auroc: float = float("-inf")
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


# ---------------------------------------------------------------------------
# metrics


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # ties share the average rank
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) with ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative label")
    ranks = _fractional_ranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Percentage of correct predictions at the given score threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    return float((np.where(s >= threshold, 1, 0) == y).mean() * 100.0)


def relative_auroc(method, baseline) -> tuple[np.ndarray, float, float]:
    """Per-fold AUROC differences against a baseline, with mean and sample (n-1) sd."""
    a = np.asarray(method, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"fold mismatch: {a.shape} vs {b.shape}")
    diffs = a - b
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1)) if len(diffs) > 1 else 0.0
    return diffs, mean, sd


def positive_scores(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of class 1 from two-class logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


# ---------------------------------------------------------------------------
# datasets the loop can train on


class GraphDataset:
    """Datapoints indexed by target row, re-encoded per fold with the given encoders."""

    def __init__(self, db: Database, datapoints: list[Datapoint], encoders: list[NodeTypeEncoder]):
        self.db = db
        self.datapoints = datapoints
        self.encoders = encoders
        self.labels = np.array([dp.label for dp in datapoints], dtype=np.int64)
        self._cache: dict = {}

    def batch(self, ids):
        return build_batch([self.datapoints[i] for i in ids], self.db, self.encoders, cache=self._cache)

    def loss(self, net, ids, train: bool = False, rng=None) -> Tensor:
        return net.loss(self.batch(ids), train, rng)

    def scores(self, net, ids) -> np.ndarray:
        ids = np.asarray(ids)
        parts = [
            positive_scores(net.forward(self.batch(ids[lo:lo + EVAL_CHUNK])).data)
            for lo in range(0, len(ids), EVAL_CHUNK)
        ]
        return np.concatenate(parts)

    def labels_of(self, ids) -> np.ndarray:
        return self.labels[np.asarray(ids)]


class TableDataset:
    """A plain feature matrix with labels, for the single-table baselines."""

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)

    def loss(self, net, ids, train: bool = False, rng=None) -> Tensor:
        ids = np.asarray(ids)
        logits = net.forward(Tensor(self.features[ids]), train, rng)
        return cross_entropy(logits, self.labels[ids])

    def scores(self, net, ids) -> np.ndarray:
        ids = np.asarray(ids)
        parts = [
            positive_scores(net.forward(Tensor(self.features[ids[lo:lo + EVAL_CHUNK]])).data)
            for lo in range(0, len(ids), EVAL_CHUNK)
        ]
        return np.concatenate(parts)

    def labels_of(self, ids) -> np.ndarray:
        return self.labels[np.asarray(ids)]


def oversample_ids(ids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Duplicate minority-class ids (cycling) until both classes are equally frequent."""
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    pos = ids[labels == 1]
    neg = ids[labels == 0]
    if len(pos) == 0 or len(neg) == 0 or len(pos) == len(neg):
        return ids.copy()
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    return np.concatenate([majority, np.resize(minority, len(majority))])


def fold_encoder_rows(datapoints: list[Datapoint], ids) -> dict[int, list[int]]:
    """Rows reachable from the given datapoints, grouped by table: the encoder fitting scope."""
    rows: dict[int, set[int]] = {}
    for i in ids:
        for t, r in datapoints[i].nodes:
            rows.setdefault(t, set()).add(r)
    return {t: sorted(s) for t, s in rows.items()}


# ---------------------------------------------------------------------------
# the loop


def train(net, data, fold: CvFold, config: TrainConfig) -> TrainResult:
    """Minibatch cross-entropy with AdamW; keeps the parameters of the best validation epoch."""
    rng = np.random.default_rng(config.seed)
    trainable = {k: t for k, t in net.params.items() if t.requires_grad}
    wd = 0.0 if config.weight_decay is None else config.weight_decay
    opt = AdamW(trainable, lr=config.lr, weight_decay=wd)
    fit_ids = np.asarray(fold.fit_ids)
    pool = oversample_ids(fit_ids, data.labels_of(fit_ids)) if config.oversample else fit_ids
    result = TrainResult()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(pool)
        weighted = 0.0
        for lo in range(0, len(order), config.batch_size):
            ids = order[lo:lo + config.batch_size]
            opt.zero_grad()
            loss = data.loss(net, ids, train=True, rng=rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite training loss ({value}) at epoch {epoch}")
            backward(loss)
            opt.step()
            weighted += value * len(ids)
        val_auroc = auroc(data.scores(net, fold.val_ids), data.labels_of(fold.val_ids))
        result.history.append({
            "epoch": epoch,
            "train_loss": weighted / len(order),
            "val_auroc": val_auroc,
        })
        if val_auroc > result.best_val_auroc:
            result.best_val_auroc = val_auroc
            result.best_epoch = epoch
            result.best_params = {k: t.data.copy() for k, t in net.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    for k, arr in result.best_params.items():
        net.params[k].data = arr.copy()
    return result


def evaluate(net, data, ids) -> dict:
    scores = data.scores(net, ids)
    labels = data.labels_of(ids)
    return {"auroc": auroc(scores, labels), "accuracy": accuracy(scores, labels), "n": int(len(ids))}


# ---------------------------------------------------------------------------
# single-table baselines


class LinearModel:
    """Logistic regression as a single linear layer trained with the same loop."""

    def __init__(self, in_width: int, classes: int = 2, seed: int = 0):
        if in_width < 1:
            raise ValueError("baseline needs at least one input feature")
        root = RngStream(seed)
        self.params = {
            "W": init_weight(root.child("W"), in_width, classes),
            "b": Tensor(np.zeros(classes), requires_grad=True),
        }

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return add(matmul(x, self.params["W"]), self.params["b"])


class MlpModel:
    """Two hidden layers at 4x then 2x the input width, with dropout after each."""

    def __init__(self, in_width: int, classes: int = 2, dropout_p: float = 0.3, seed: int = 0):
        if in_width < 1:
            raise ValueError("baseline needs at least one input feature")
        h1, h2 = 4 * in_width, 2 * in_width
        root = RngStream(seed)
        self.dropout_p = dropout_p
        self.params = {
            "W1": init_weight(root.child("W1"), in_width, h1),
            "b1": Tensor(np.zeros(h1), requires_grad=True),
            "W2": init_weight(root.child("W2"), h1, h2),
            "b2": Tensor(np.zeros(h2), requires_grad=True),
            "W3": init_weight(root.child("W3"), h2, classes),
            "b3": Tensor(np.zeros(classes), requires_grad=True),
        }

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        p = self.params
        h = relu(add(matmul(x, p["W1"]), p["b1"]))
        h = dropout(h, self.dropout_p, train, rng)
        h = relu(add(matmul(h, p["W2"]), p["b2"]))
        h = dropout(h, self.dropout_p, train, rng)
        return add(matmul(h, p["W3"]), p["b3"])


def single_table_features(db: Database, encoders: list[NodeTypeEncoder]) -> np.ndarray:
    """Target-table rows encoded to a flat matrix; categoricals become one-hot columns."""
    ti, _ = db.target
    enc = encoders[ti]
    n = db.tables[ti].nrows
    width = enc.dense_width + sum(enc.categorical[ci].cardinality + 1 for ci in enc.cat_columns)
    out = np.zeros((n, width))
    for r in range(n):
        node = encode_node(db, ti, r, enc)
        out[r, :enc.dense_width] = node.dense
        offset = enc.dense_width
        for j, ci in enumerate(enc.cat_columns):
            out[r, offset + node.cat_indices[j]] = 1.0
            offset += enc.categorical[ci].cardinality + 1
    return out


def _baseline_config(config: TrainConfig) -> TrainConfig:
    if config.weight_decay is None:
        return replace(config, weight_decay=0.01)
    return config


def baseline_logreg(features: np.ndarray, labels: np.ndarray, fold: CvFold,
                    config: TrainConfig) -> tuple[LinearModel, TrainResult]:
    config = _baseline_config(config)
    net = LinearModel(features.shape[1], seed=config.seed)
    result = train(net, TableDataset(features, labels), fold, config)
    return net, result


def baseline_mlp(features: np.ndarray, labels: np.ndarray, fold: CvFold,
                 config: TrainConfig, dropout_p: float = 0.3) -> tuple[MlpModel, TrainResult]:
    config = _baseline_config(config)
    net = MlpModel(features.shape[1], dropout_p=dropout_p, seed=config.seed)
    result = train(net, TableDataset(features, labels), fold, config)
    return net, result
