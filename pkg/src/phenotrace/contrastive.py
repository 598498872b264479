"""Triplet-loss pretraining, supervised fine-tuning and user-level inference."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .evaluation.metrics import balanced_accuracy, confusion
from .features.dataset import NormStats, apply_norm, fit_norm
from .nn import (
    Adam,
    DenseNet,
    backward,
    forward,
    load_checkpoint,
    make_rng,
    save_checkpoint,
    sigmoid,
    triplet_margin_loss,
    weighted_bce,
)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    embed_hidden: int = 64
    embed_dim: int = 32
    head_hidden: int = 32
    head_dim: int = 16
    clf_hidden: int = 16
    pretrain_epochs: int = 10
    triplets_per_epoch: int = 512
    finetune_epochs: int = 30
    batch_size: int = 64
    margin: float = 1.0
    lr: float = 3e-3
    weight_decay: float = 0.0
    patience: int = 5
    val_fraction: float = 0.1
    joint_finetune: bool = True
    sampler: str = "weighted"  # or "uniform"
    positive_weight: float | None = None  # None: negatives / positives
    input_clip: float | None = 3.0  # bound on normalised inputs; None disables
    seed: int = 0

    def __post_init__(self) -> None:
        for f in ("embed_hidden", "embed_dim", "head_hidden", "head_dim", "clf_hidden", "batch_size", "patience"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be a positive integer")
        for f in ("pretrain_epochs", "finetune_epochs", "triplets_per_epoch"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.input_clip is not None and self.input_clip <= 0:
            raise ValueError("input_clip must be positive")
        if self.sampler not in ("weighted", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


# --------------------------------------------------------------------------
# triplets


def sample_triplets(user_ids: Sequence, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` (anchor, positive, negative) row-index triplets.

    The anchor user is uniform over users with at least two rows, anchor and
    positive are distinct rows of that user, and the negative is uniform over
    every row belonging to someone else.
    """
    ids = np.asarray(user_ids)
    order = np.argsort(ids, kind="stable")
    users, starts, sizes = np.unique(ids[order], return_index=True, return_counts=True)
    eligible = np.flatnonzero(sizes >= 2)
    if len(eligible) < 2:
        raise TrainingError("insufficient pretraining structure")
    n = len(ids)
    u = eligible[rng.integers(0, len(eligible), size=count)]
    size, start = sizes[u], starts[u]
    a_off = np.floor(rng.random(count) * size).astype(int)
    p_off = (a_off + 1 + np.floor(rng.random(count) * (size - 1)).astype(int)) % size
    neg = np.floor(rng.random(count) * (n - size)).astype(int)
    neg = np.where(neg >= start, neg + size, neg)
    return np.stack([order[start + a_off], order[start + p_off], order[neg]], axis=1)


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    embedder: DenseNet
    head: DenseNet
    history: list[dict] = field(default_factory=list)


def init_embedder(in_dim: int, config: TrainConfig, rng: np.random.Generator) -> DenseNet:
    return DenseNet.init([in_dim, config.embed_hidden, config.embed_dim], ["relu", "relu"], rng)


def init_head(config: TrainConfig, rng: np.random.Generator) -> DenseNet:
    return DenseNet.init([config.embed_dim, config.head_hidden, config.head_dim], ["relu", "identity"], rng)


def init_classifier(config: TrainConfig, rng: np.random.Generator) -> DenseNet:
    return DenseNet.init([config.embed_dim, config.clf_hidden, 1], ["relu", "identity"], rng)


def triplet_objective(embedder: DenseNet, head: DenseNet, X: np.ndarray, triplets: np.ndarray, margin: float):
    """Triplet loss on projected embeddings and gradients for embedder + head params."""
    B = len(triplets)
    batch = X[triplets.T.ravel()]  # anchors, then positives, then negatives
    E, cache_e = forward(embedder, batch)
    Z, cache_h = forward(head, E)
    loss, (ga, gp, gn) = triplet_margin_loss(Z[:B], Z[B : 2 * B], Z[2 * B :], margin)
    gE, grads_h = backward(head, cache_h, np.vstack([ga, gp, gn]))
    _, grads_e = backward(embedder, cache_e, gE)
    return loss, grads_e + grads_h


def classification_objective(embedder: DenseNet, classifier: DenseNet, X: np.ndarray, y: np.ndarray, pos_weight: float):
    """Weighted BCE of the classifier on embedded rows and gradients for embedder + classifier params."""
    E, cache_e = forward(embedder, X)
    logits, cache_c = forward(classifier, E)
    loss, g = weighted_bce(logits[:, 0], y, pos_weight)
    gE, grads_c = backward(classifier, cache_c, g[:, None])
    _, grads_e = backward(embedder, cache_e, gE)
    return loss, grads_e + grads_c


def pretrain(X: np.ndarray, user_ids: Sequence, config: TrainConfig, rng: np.random.Generator | None = None) -> PretrainResult:
    """Fit embedder and projection head with the triplet objective.

    Labels are deliberately not a parameter. ``history`` records the mean
    training loss and the loss on a fixed probe set after each epoch.
    """
    rng = rng if rng is not None else make_rng(config.seed)
    X = np.asarray(X, dtype=float)
    embedder = init_embedder(X.shape[1], config, rng)
    head = init_head(config, rng)
    result = PretrainResult(embedder, head)
    if config.pretrain_epochs == 0:
        return result
    probe = sample_triplets(user_ids, 256, rng)
    params = embedder.params() + head.params()
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    steps = max(1, math.ceil(config.triplets_per_epoch / config.batch_size))
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for _ in range(steps):
            batch = sample_triplets(user_ids, config.batch_size, rng)
            loss, grads = triplet_objective(embedder, head, X, batch, config.margin)
            if not np.isfinite(loss):
                raise TrainingError(f"pretraining diverged at epoch {epoch}: loss={loss}")
            opt.step(params, grads)
            total += loss
        probe_loss = triplet_objective(embedder, head, X, probe, config.margin)[0]
        if not np.isfinite(probe_loss):
            raise TrainingError(f"pretraining diverged at epoch {epoch}: probe loss={probe_loss}")
        result.history.append({"epoch": epoch, "loss": total / steps, "probe_loss": probe_loss})
    return result


def separation_ratio(rows: np.ndarray, user_ids: Sequence, embedder: DenseNet | None = None) -> float:
    """Mean within-user pairwise distance over mean between-user distance.

    ``rows`` are embedded with ``embedder`` first when one is given. Lower
    means tighter per-user clusters.
    """
    E = np.asarray(rows, dtype=float) if embedder is None else embedder(rows)
    ids = np.asarray(user_ids)
    if len(np.unique(ids)) < 2:
        raise ValueError("need at least two users")
    d = pdist(E)
    i, j = np.triu_indices(len(ids), k=1)
    same = ids[i] == ids[j]
    if not same.any():
        raise ValueError("no user has more than one row")
    inter = d[~same].mean()
    if inter == 0:
        raise ValueError("degenerate embeddings")
    return float(d[same].mean() / inter)


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class TrainedModel:
    embedder: DenseNet
    classifier: DenseNet
    norm: NormStats | None = None
    registry_hash: str = ""
    feature_names: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.classifier.in_dim != self.embedder.out_dim:
            raise ValueError("classifier input width must equal embedding width")

    def predict_normalized(self, Z: np.ndarray) -> np.ndarray:
        logits = self.classifier(self.embedder(Z))
        return sigmoid(logits[..., 0])

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        """Day-level probabilities for raw (unnormalised, NaN-missing) rows."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = apply_norm(X, self.norm) if self.norm is not None else X
        return self.predict_normalized(Z)


def predict_user(model: TrainedModel, rows: np.ndarray) -> float:
    """Mean of the day-wise probabilities for one user's rows."""
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        raise ValueError("no data for user")
    return float(np.mean(model.predict_rows(rows)))


def split_validation_users(users: Sequence, user_labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified user-level hold-out; returns ``(train_users, val_users)``.

    Returns no validation users when either class has fewer than two users.
    """
    users = np.asarray(users, dtype=object)
    y = np.asarray(user_labels).astype(bool)
    if fraction <= 0 or y.sum() < 2 or (~y).sum() < 2:
        return list(users), []
    n_val = max(2, int(round(fraction * len(users))))
    n_pos = min(int(y.sum()) - 1, max(1, int(round(n_val * y.mean()))))
    n_neg = min(int((~y).sum()) - 1, max(1, n_val - n_pos))
    val = list(rng.permutation(users[y])[:n_pos]) + list(rng.permutation(users[~y])[:n_neg])
    val_set = set(val)
    return [u for u in users if u not in val_set], sorted(val, key=str)


def sampler_cdf(labels: np.ndarray, kind: str = "weighted") -> np.ndarray:
    """Cumulative row-sampling distribution.

    ``weighted`` gives each row probability proportional to the inverse
    frequency of its class, so both classes are drawn equally often.
    """
    y = np.asarray(labels, dtype=int)
    if kind == "weighted":
        n_pos = int(y.sum())
        n_neg = len(y) - n_pos
        if n_pos == 0 or n_neg == 0:
            raise TrainingError("degenerate labels")
        probs = np.where(y == 1, 1.0 / n_pos, 1.0 / n_neg)
    elif kind == "uniform":
        probs = np.ones(len(y))
    else:
        raise ValueError(f"unknown sampler {kind!r}")
    cdf = np.cumsum(probs)
    return cdf / cdf[-1]


def draw_rows(cdf: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices drawn with replacement from ``sampler_cdf`` output."""
    return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), len(cdf) - 1)


def _user_balanced_accuracy(model_probs: np.ndarray, row_users: np.ndarray, users: list, labels: dict) -> float:
    probs = np.array([model_probs[row_users == u].mean() for u in users])
    y = np.array([labels[u] for u in users])
    return balanced_accuracy(confusion(probs, y))


def finetune(
    embedder: DenseNet,
    X: np.ndarray,
    user_ids: Sequence,
    y: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> TrainedModel:
    """Train a classifier on embeddings of normalised rows ``X``.

    Minibatches come from a sampler whose per-row weight is the inverse of
    its class frequency, and the BCE up-weights positives by
    negatives/positives. A stratified 10% of users is held out for early
    stopping on user-level balanced accuracy. The embedder passed in is
    copied, never modified.
    """
    rng = rng if rng is not None else make_rng(config.seed)
    X = np.asarray(X, dtype=float)
    ids = np.asarray(user_ids, dtype=object)
    y = np.asarray(y, dtype=int)
    if len(np.unique(y)) < 2:
        raise TrainingError("degenerate labels")
    users = list(dict.fromkeys(ids.tolist()))
    user_label = {}
    for u, lab in zip(ids, y):
        user_label.setdefault(u, int(lab))
    classifier = init_classifier(config, rng)
    embedder = embedder.copy()
    train_users, val_users = split_validation_users(
        users, np.array([user_label[u] for u in users]), config.val_fraction, rng
    )
    tmask = np.isin(ids, train_users)
    Xt, yt = X[tmask], y[tmask]
    if len(np.unique(yt)) < 2:
        raise TrainingError("degenerate labels")
    n_pos = int(yt.sum())
    n_neg = len(yt) - n_pos
    cdf = sampler_cdf(yt, config.sampler)
    pos_weight = config.positive_weight if config.positive_weight is not None else n_neg / n_pos

    params = (embedder.params() if config.joint_finetune else []) + classifier.params()
    n_embed = len(embedder.params())
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    steps = max(1, math.ceil(len(yt) / config.batch_size))
    model = TrainedModel(embedder, classifier)
    vmask = np.isin(ids, val_users)
    best_score, best_state, stale = -np.inf, None, 0
    for epoch in range(config.finetune_epochs):
        total = 0.0
        for _ in range(steps):
            idx = draw_rows(cdf, config.batch_size, rng)
            loss, grads = classification_objective(embedder, classifier, Xt[idx], yt[idx], pos_weight)
            if not np.isfinite(loss):
                raise TrainingError(f"fine-tuning diverged at epoch {epoch}")
            opt.step(params, grads if config.joint_finetune else grads[n_embed:])
            total += loss
        entry = {"epoch": epoch, "loss": total / steps, "val_balanced_accuracy": None}
        if val_users:
            score = _user_balanced_accuracy(model.predict_normalized(X[vmask]), ids[vmask], val_users, user_label)
            entry["val_balanced_accuracy"] = score
            if score > best_score:
                best_score, stale = score, 0
                best_state = (embedder.copy(), classifier.copy())
            else:
                stale += 1
        model.history.append(entry)
        if val_users and stale >= config.patience:
            break
    if best_state is not None:
        model.embedder, model.classifier = best_state
    return model


def train_model(
    X_raw: np.ndarray,
    user_ids: Sequence,
    y: np.ndarray,
    config: TrainConfig,
    pretrain_seed: int,
    finetune_seed: int,
    pretrained: PretrainResult | None = None,
) -> TrainedModel:
    """Normalise on the given (training) rows, pretrain, fine-tune."""
    norm = fit_norm(X_raw, config.input_clip)
    Z = apply_norm(X_raw, norm)
    if pretrained is None:
        pretrained = pretrain(Z, user_ids, config, make_rng(pretrain_seed))
    model = finetune(pretrained.embedder, Z, user_ids, y, config, make_rng(finetune_seed))
    model.norm = norm
    return model


def save_model(path, model: TrainedModel, config: TrainConfig | None = None) -> None:
    """Checkpoint a trained model, normalisation statistics included."""
    extra = {"feature_names": list(model.feature_names)}
    if model.norm is not None:
        extra["norm"] = {k: getattr(model.norm, k).tolist() for k in ("mean", "sd", "median")}
        extra["norm"]["clip"] = model.norm.clip
    save_checkpoint(
        path,
        {"embedder": model.embedder, "classifier": model.classifier},
        model.registry_hash,
        config.to_dict() if config else {},
        extra,
    )


def load_model(path) -> TrainedModel:
    doc = load_checkpoint(path)
    extra = doc.get("extra", {})
    norm = None
    if "norm" in extra:
        doc_norm = dict(extra["norm"])
        clip = doc_norm.pop("clip", None)
        norm = NormStats(**{k: np.array(v, dtype=float) for k, v in doc_norm.items()}, clip=clip)
    return TrainedModel(
        doc["networks"]["embedder"],
        doc["networks"]["classifier"],
        norm,
        doc["registry_hash"],
        extra.get("feature_names", []),
    )
