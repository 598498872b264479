"""Permutation-sampled Shapley attributions and sensor-group aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import combinations, permutations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .contrastive import TrainConfig, TrainedModel, finetune, pretrain
from .features.dataset import Dataset, apply_norm, fit_norm
from .features.registry import SENSOR_GROUPS, FeatureRegistry
from .nn import derive_seed, make_rng

ModelFn = Callable[[np.ndarray], np.ndarray]  # (n, d) -> (n,)


@dataclass
class Attribution:
    values: np.ndarray
    baseline: np.ndarray
    n_permutations: int
    output_x: float
    output_baseline: float


def shapley_sampling(model_fn: ModelFn, x, baseline, n_permutations: int, rng: np.random.Generator) -> Attribution:
    """Monte-Carlo Shapley values by walking random feature orderings.

    Each ordering moves from ``baseline`` to ``x`` one feature at a time and
    credits each feature with the change it causes, so every ordering's
    credits telescope to ``f(x) - f(baseline)``. When the budget covers all
    ``d!`` orderings they are used in shuffled complete blocks (sampling
    without replacement, exact after each full block); otherwise orderings
    are drawn in antithetic pairs (an ordering and its reverse) to cut the
    variance of the estimate.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be at least 1")
    x = np.asarray(x, dtype=float)
    b = np.asarray(baseline, dtype=float)
    if x.shape != b.shape or x.ndim != 1:
        raise ValueError("x and baseline must be vectors of equal length")
    d = len(x)
    perms = _orderings(d, n_permutations, rng)
    # path[k, s] is the input after the first s features of ordering k switched to x
    switched = np.zeros((n_permutations, d + 1, d), dtype=bool)
    rank = np.empty_like(perms)
    np.put_along_axis(rank, perms, np.arange(d)[None, :].repeat(n_permutations, 0), axis=1)
    switched[:, 1:, :] = rank[:, None, :] < np.arange(1, d + 1)[None, :, None]
    path = np.where(switched, x, b)
    out = np.asarray(model_fn(path.reshape(-1, d)), dtype=float).reshape(n_permutations, d + 1)
    # marginal of the feature switched at step s lands on perms[k, s]
    marg = np.diff(out, axis=1)
    phi = np.zeros(d)
    np.add.at(phi, perms.ravel(), marg.ravel())
    phi /= n_permutations
    return Attribution(phi, b, n_permutations, float(out[0, -1]), float(out[0, 0]))


def _orderings(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if math.factorial(d) <= n:
        every = np.array(list(permutations(range(d))))
        blocks = [every[rng.permutation(len(every))] for _ in range(-(-n // len(every)))]
        return np.concatenate(blocks)[:n]
    half = np.argsort(rng.random(((n + 1) // 2, d)), axis=1)
    return np.concatenate([half, half[:, ::-1]])[:n]


def exact_shapley(model_fn: ModelFn, x, baseline) -> np.ndarray:
    """Shapley values by enumerating every coalition (small ``d`` only)."""
    x = np.asarray(x, dtype=float)
    b = np.asarray(baseline, dtype=float)
    d = len(x)
    if d > 16:
        raise ValueError("exact enumeration limited to 16 features")

    def value(coalition) -> float:
        z = b.copy()
        z[list(coalition)] = x[list(coalition)]
        return float(np.asarray(model_fn(z[None, :])).ravel()[0])

    phi = np.zeros(d)
    for j in range(d):
        others = [i for i in range(d) if i != j]
        for size in range(d):
            weight = math.factorial(size) * math.factorial(d - size - 1) / math.factorial(d)
            for s in combinations(others, size):
                phi[j] += weight * (value(s + (j,)) - value(s))
    return phi


def model_function(model: TrainedModel) -> ModelFn:
    """Raw-feature-space probability function of a trained model."""
    return model.predict_rows


def attribute_rows(
    model_fn: ModelFn, rows, baseline, n_permutations: int = 200, seed: int = 0
) -> np.ndarray:
    """Attributions for each row, shape ``(n_rows, d)``.

    Missing entries are replaced by the baseline value first, so features a
    row does not observe receive exactly zero credit.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if len(rows) == 0:
        raise ValueError("no rows to attribute")
    b = np.asarray(baseline, dtype=float)
    out = np.empty_like(rows)
    for i, row in enumerate(rows):
        x = np.where(np.isnan(row), b, row)
        out[i] = shapley_sampling(model_fn, x, b, n_permutations, make_rng(derive_seed(seed, "shapley", i))).values
    return out


def global_importance(model, rows, baseline, n_permutations: int = 200, seed: int = 0) -> np.ndarray:
    """Mean absolute attribution per feature over ``rows``.

    ``model`` is a TrainedModel or any batch function of raw rows; the
    baseline is normally the training rows' per-feature medians.
    """
    fn = model_function(model) if isinstance(model, TrainedModel) else model
    return np.abs(attribute_rows(fn, rows, baseline, n_permutations, seed)).mean(axis=0)


def aggregate_by_sensor(importances, registry: FeatureRegistry) -> dict[str, float]:
    """Active features pass through by name; passive features are summed per sensor group."""
    imp = np.asarray(importances, dtype=float)
    if len(imp) != len(registry):
        raise ValueError("importances do not match the registry")
    out: dict[str, float] = {}
    for value, spec in zip(imp, registry):
        if spec.sensor_group == "active":
            out[spec.name] = float(value)
    for group in SENSOR_GROUPS[1:]:
        idx = registry.group_indices(group)
        if idx:
            out[group] = float(imp[idx].sum())
    return out


# --------------------------------------------------------------------------
# cross-validated importances


def user_folds(users: Sequence[str], n_folds: int | None) -> list[list[str]]:
    """Test-user groups: one per user when ``n_folds`` is None, else round-robin."""
    users = list(users)
    if n_folds is None or n_folds >= len(users):
        return [[u] for u in users]
    if n_folds < 2:
        raise ValueError("need at least two folds")
    return [users[k::n_folds] for k in range(n_folds)]


def explain_cv(
    dataset: Dataset,
    outcome: str,
    config: TrainConfig,
    base_seed: int = 0,
    n_permutations: int = 200,
    n_folds: int | None = None,
) -> np.ndarray:
    """Importances from models trained without the rows they explain.

    Per fold: fit normalisation, pretrain and fine-tune on the training users,
    then attribute every held-out row against the training medians. Returns
    the mean absolute attribution over all held-out rows.
    """
    totals = np.zeros(dataset.X.shape[1])
    count = 0
    for k, test_users in enumerate(user_folds(dataset.users, n_folds)):
        test = np.isin(dataset.participant_ids, test_users)
        X_train, ids_train = dataset.X[~test], dataset.participant_ids[~test]
        norm = fit_norm(X_train, config.input_clip)
        Z = apply_norm(X_train, norm)
        key = ("explain", outcome, k)
        pre = pretrain(Z, ids_train, config, make_rng(derive_seed(base_seed, "pretrain", *key)))
        model = finetune(
            pre.embedder, Z, ids_train, dataset.row_labels(outcome)[~test], config,
            make_rng(derive_seed(base_seed, "finetune", *key)),
        )
        model.norm = norm
        attr = attribute_rows(model.predict_rows, dataset.X[test], norm.median, n_permutations, derive_seed(base_seed, *key))
        totals += np.abs(attr).sum(axis=0)
        count += len(attr)
    return totals / count


def top_features(importances, names: Sequence[str], k: int = 5) -> list[str]:
    order = np.argsort(-np.asarray(importances, dtype=float), kind="stable")
    return [names[i] for i in order[:k]]


def write_importances(importances, registry: FeatureRegistry, out_dir) -> tuple[Path, Path]:
    """``importances.csv`` (feature, group, mean_abs_attribution) plus a JSON twin."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imp = np.asarray(importances, dtype=float)
    csv_path = out_dir / "importances.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "group", "mean_abs_attribution"])
        for spec, v in zip(registry, imp):
            w.writerow([spec.name, spec.sensor_group, repr(float(v))])
    json_path = out_dir / "importances.json"
    doc = {
        "v": 1,
        "features": {spec.name: float(v) for spec, v in zip(registry, imp)},
        "groups": aggregate_by_sensor(imp, registry),
    }
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
