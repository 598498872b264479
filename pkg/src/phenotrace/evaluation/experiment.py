"""Repeated leave-one-subject-out experiments and the comparisons built on them."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from ..cohort import OUTCOMES
from ..contrastive import TrainConfig, TrainingError, finetune, pretrain
from ..features.dataset import Dataset, apply_norm, fit_norm
from ..features.registry import FeatureRegistry
from ..nn import derive_seed, make_rng
from .metrics import SCALAR_METRICS, MetricBundle, confusion, metrics
from .stats import paired_t_test, significance_stars, welch_t_test, wilcoxon_signed_rank

CONDITIONS = ("passive", "active", "combined")

# stage name, held-out user, participant ids of the rows consumed
Observer = Callable[[str, str, np.ndarray], None]


@dataclass(frozen=True)
class Fold:
    test_user: str
    train_users: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    """Ordered folds in which every user is the test user exactly once."""

    folds: tuple[Fold, ...]

    def __post_init__(self) -> None:
        users = [f.test_user for f in self.folds]
        if len(set(users)) != len(users):
            raise ValueError("a user is tested more than once")
        everyone = set(users)
        for f in self.folds:
            if f.test_user in f.train_users or set(f.train_users) | {f.test_user} != everyone:
                raise ValueError(f"fold for {f.test_user!r} is not a partition of the users")

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]


def loso_folds(users: Sequence[str]) -> FoldPlan:
    """One fold per user, in the given order."""
    users = list(users)
    if len(users) < 2:
        raise ValueError("need at least two users")
    if len(set(users)) != len(users):
        raise ValueError("duplicate user ids")
    return FoldPlan(tuple(Fold(u, tuple(v for v in users if v != u)) for u in users))


def condition_columns(registry: FeatureRegistry, condition: str) -> list[int]:
    if condition == "active":
        return registry.group_indices("active")
    if condition == "passive":
        return [i for i, g in enumerate(registry.groups) if g != "active"]
    if condition == "combined":
        return list(range(len(registry)))
    raise ValueError(f"unknown condition {condition!r}")


def condition_mask(registry: FeatureRegistry, condition: str) -> np.ndarray:
    """Boolean mask of the registry columns a condition may use."""
    mask = np.zeros(len(registry), dtype=bool)
    mask[condition_columns(registry, condition)] = True
    return mask


@dataclass
class ExperimentResult:
    outcome: str
    condition: str
    users: list[str]
    labels: np.ndarray
    scores: np.ndarray
    probabilities: np.ndarray  # (users, repetitions)

    @property
    def repetitions(self) -> int:
        return self.probabilities.shape[1]

    def bundles(self, threshold: float = 0.5) -> list[MetricBundle]:
        out = []
        for r in range(self.repetitions):
            p = self.probabilities[:, r]
            out.append(metrics(confusion(p, self.labels, threshold), p, self.labels))
        return out

    def balanced_accuracies(self) -> np.ndarray:
        return np.array([b.balanced_accuracy for b in self.bundles()])


# --------------------------------------------------------------------------
# running folds

_SHARED: dict = {}


def _init_worker(dataset: Dataset) -> None:
    _SHARED["dataset"] = dataset


def _run_fold(task) -> tuple[int, int, dict[str, float]]:
    rep, fold_idx, fold, outcomes, condition, config, base_seed, observer = task
    dataset: Dataset = _SHARED["dataset"]
    return rep, fold_idx, run_fold(dataset, fold, outcomes, condition, config, base_seed, rep, observer)


def run_fold(
    dataset: Dataset,
    fold: Fold,
    outcomes: Sequence[str],
    condition: str,
    config: TrainConfig,
    base_seed: int,
    repetition: int,
    observer: Observer | None = None,
) -> dict[str, float]:
    """Train on ``fold.train_users`` and return the held-out user's probability per outcome.

    Normalisation and pretraining see training rows only and are shared by
    all outcomes of the fold (neither reads labels). Columns outside the
    condition are masked to zero after normalisation.
    """
    keep = condition_mask(dataset.registry, condition)
    train_mask = np.isin(dataset.participant_ids, fold.train_users)
    test_mask = dataset.participant_ids == fold.test_user
    X_train, X_test = dataset.X[train_mask], dataset.X[test_mask]
    ids_train = dataset.participant_ids[train_mask]
    if observer:
        observer("norm", fold.test_user, ids_train)
    norm = fit_norm(X_train, config.input_clip)
    Z_train, Z_test = apply_norm(X_train, norm), apply_norm(X_test, norm)
    # masked columns read as a constant 0, so every condition shares one input width
    Z_train[:, ~keep] = 0.0
    Z_test[:, ~keep] = 0.0
    # seeds ignore the condition so conditions are paired run for run
    key = (repetition, fold.test_user)
    try:
        if observer and config.pretrain_epochs:
            observer("pretrain", fold.test_user, ids_train)
        pre = pretrain(Z_train, ids_train, config, make_rng(derive_seed(base_seed, "pretrain", *key)))
        out = {}
        for outcome in outcomes:
            y_train = dataset.row_labels(outcome)[train_mask]
            if observer:
                observer("finetune", fold.test_user, ids_train)
            model = finetune(
                pre.embedder, Z_train, ids_train, y_train, config, make_rng(derive_seed(base_seed, "finetune", *key, outcome))
            )
            out[outcome] = float(np.mean(model.predict_normalized(Z_test)))
    except TrainingError as exc:
        raise TrainingError(f"{exc} (condition={condition}, repetition={repetition}, test user={fold.test_user})") from exc
    return out


def run_grid(
    dataset: Dataset,
    outcomes: Sequence[str],
    condition: str,
    config: TrainConfig,
    repetitions: int,
    base_seed: int = 0,
    jobs: int = 1,
    observer: Observer | None = None,
) -> dict[str, ExperimentResult]:
    """LOSO over every user, repeated with different training seeds."""
    users = dataset.users
    folds = loso_folds(users)
    probs = {o: np.full((len(users), repetitions), np.nan) for o in outcomes}
    tasks = [
        (rep, i, fold, tuple(outcomes), condition, config, base_seed, observer)
        for rep in range(repetitions)
        for i, fold in enumerate(folds)
    ]
    if jobs > 1 and observer is None:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(dataset,)) as pool:
            results = list(pool.map(_run_fold, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        _init_worker(dataset)
        results = [_run_fold(t) for t in tasks]
    for rep, i, out in results:
        for o, p in out.items():
            probs[o][i, rep] = p
    return {
        o: ExperimentResult(o, condition, users, dataset.user_labels(o, users), dataset.user_scores(o, users), probs[o])
        for o in outcomes
    }


def run_experiment(
    dataset: Dataset,
    outcome: str,
    condition: str,
    config: TrainConfig,
    repetitions: int,
    base_seed: int = 0,
    jobs: int = 1,
) -> ExperimentResult:
    return run_grid(dataset, [outcome], condition, config, repetitions, base_seed, jobs)[outcome]


# --------------------------------------------------------------------------
# reports


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def summarise(bundles: Sequence[MetricBundle]) -> dict[str, dict[str, float | None]]:
    out = {}
    for name in SCALAR_METRICS:
        vals = np.array([getattr(b, name) for b in bundles], dtype=float)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            out[name] = {"mean": None, "sd": None}
            continue
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[name] = {"mean": float(vals.mean()), "sd": sd}
    return out


@dataclass
class EvalReport:
    results: dict[str, dict[str, ExperimentResult]]  # outcome -> condition -> result
    comparisons: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        outcomes = {}
        for outcome in sorted(self.results):
            conds = {}
            for cond in sorted(self.results[outcome]):
                res = self.results[outcome][cond]
                bundles = res.bundles()
                conds[cond] = {
                    "repetitions": [
                        {k: _clean(v) if not isinstance(v, dict) else v for k, v in b.to_dict().items()} for b in bundles
                    ],
                    "summary": summarise(bundles),
                    "users": list(res.users),
                    "labels": res.labels.tolist(),
                    "scores": res.scores.tolist(),
                    "probabilities": res.probabilities.tolist(),
                }
            outcomes[outcome] = conds
        return {
            "v": 1,
            "meta": self.meta,
            "outcomes": outcomes,
            "comparisons": [{k: _clean(v) for k, v in row.items()} for row in self.comparisons],
        }


def evaluate(
    dataset: Dataset,
    outcomes: Sequence[str] = OUTCOMES,
    conditions: Sequence[str] = ("combined",),
    config: TrainConfig | None = None,
    repetitions: int = 10,
    base_seed: int = 0,
    jobs: int = 1,
) -> EvalReport:
    config = config or TrainConfig()
    results: dict[str, dict[str, ExperimentResult]] = {o: {} for o in outcomes}
    for cond in conditions:
        for o, res in run_grid(dataset, outcomes, cond, config, repetitions, base_seed, jobs).items():
            results[o][cond] = res
    report = EvalReport(results, meta={"repetitions": repetitions, "base_seed": base_seed, "train": config.to_dict()})
    if len(conditions) >= 2:
        report.comparisons = compare_conditions(report)
    return report


def compare_conditions(report: EvalReport) -> list[dict]:
    """Pairwise Wilcoxon tests on per-repetition balanced accuracy."""
    rows = []
    for outcome in sorted(report.results):
        conds = report.results[outcome]
        names = [c for c in CONDITIONS if c in conds] + sorted(c for c in conds if c not in CONDITIONS)
        if len(names) < 2:
            raise ValueError("need at least two conditions")
        reps = {conds[c].repetitions for c in names}
        if len(reps) != 1:
            raise ValueError("conditions have different repetition counts")
        for a, b in combinations(names, 2):
            ba_a, ba_b = conds[a].balanced_accuracies(), conds[b].balanced_accuracies()
            row = {
                "outcome": outcome,
                "condition_a": a,
                "condition_b": b,
                "mean_a": float(ba_a.mean()),
                "sd_a": float(ba_a.std(ddof=1)) if len(ba_a) > 1 else 0.0,
                "mean_b": float(ba_b.mean()),
                "sd_b": float(ba_b.std(ddof=1)) if len(ba_b) > 1 else 0.0,
                "p": None,
                "stars": "",
                "note": "",
            }
            try:
                p = wilcoxon_signed_rank(ba_a, ba_b).pvalue
                row["p"], row["stars"] = p, significance_stars(p)
            except ValueError as exc:
                row["note"] = str(exc)
            rows.append(row)
    return rows


def ablation_pretraining(
    dataset: Dataset,
    outcomes: Sequence[str] = OUTCOMES,
    config: TrainConfig | None = None,
    repetitions: int = 10,
    base_seed: int = 0,
    condition: str = "combined",
    jobs: int = 1,
) -> dict:
    """Same protocol with and without pretraining; paired t-test on pooled balanced accuracies."""
    config = config or TrainConfig()
    arms = {
        "pretrained": run_grid(dataset, outcomes, condition, config, repetitions, base_seed, jobs),
        "no_pretraining": run_grid(dataset, outcomes, condition, config.replace(pretrain_epochs=0), repetitions, base_seed, jobs),
    }
    table = {"outcomes": {}, "pooled": {}, "test": {}}
    pooled = {arm: [] for arm in arms}
    for o in outcomes:
        row = {}
        for arm, res in arms.items():
            ba = res[o].balanced_accuracies()
            pooled[arm].extend(ba.tolist())
            row[arm] = {"mean": float(ba.mean()), "sd": float(ba.std(ddof=1)) if len(ba) > 1 else 0.0}
        table["outcomes"][o] = row
    for arm, vals in pooled.items():
        table["pooled"][arm] = float(np.mean(vals))
    try:
        res = paired_t_test(pooled["pretrained"], pooled["no_pretraining"])
        table["test"] = {"t": res.statistic, "df": res.df, "p": res.pvalue, "stars": significance_stars(res.pvalue)}
    except ValueError as exc:
        table["test"] = {"t": None, "df": None, "p": None, "stars": "", "note": str(exc)}
    table["balanced_accuracy"] = {arm: pooled[arm] for arm in arms}
    return table


def accuracy_by_score_bin(predictions, labels, scores, bin_edges) -> list[dict]:
    """Share of correct risk classifications per score bin.

    Bins are ``[edge_i, edge_{i+1})`` except the last, which is closed. Empty
    bins report ``None``. Scores outside the edges raise.
    """
    pred = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=float)
    edges = np.asarray(bin_edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must increase")
    if s.size and (s.min() < edges[0] or s.max() > edges[-1]):
        raise ValueError("bins do not cover the score range")
    rows = []
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        inside = (s >= lo) & ((s < hi) if k < len(edges) - 2 else (s <= hi))
        n = int(inside.sum())
        acc = float(np.mean(pred[inside] == y[inside])) if n else None
        rows.append({"low": float(lo), "high": float(hi), "n": n, "accuracy": acc})
    return rows


def feature_group_comparison(dataset: Dataset, outcome: str, feature: str) -> dict:
    """Welch t-test of per-user feature means between low- and high-risk users."""
    j = dataset.registry.index(feature)
    users = dataset.users
    means = np.array([np.nanmean(dataset.X[dataset.user_mask(u), j]) if np.any(~np.isnan(dataset.X[dataset.user_mask(u), j])) else np.nan for u in users])
    labels = dataset.user_labels(outcome, users).astype(bool)
    ok = ~np.isnan(means)
    low, high = means[ok & ~labels], means[ok & labels]
    if len(low) < 2 or len(high) < 2:
        raise ValueError("group too small")
    res = welch_t_test(low, high)
    return {
        "feature": feature,
        "mean_low": float(low.mean()),
        "mean_high": float(high.mean()),
        "n_low": int(len(low)),
        "n_high": int(len(high)),
        "t": res.statistic,
        "p": res.pvalue,
        "stars": significance_stars(res.pvalue),
    }
