import numpy as np
import pytest

import phenotrace.contrastive as C
from phenotrace.contrastive import (
    TrainConfig,
    TrainedModel,
    TrainingError,
    draw_rows,
    finetune,
    init_classifier,
    init_embedder,
    load_model,
    predict_user,
    pretrain,
    sample_triplets,
    sampler_cdf,
    save_model,
    separation_ratio,
    split_validation_users,
    train_model,
)
from phenotrace.evaluation.metrics import balanced_accuracy, confusion
from phenotrace.nn import grad_check, make_rng, weighted_bce

SMALL = TrainConfig(embed_hidden=16, embed_dim=8, head_hidden=8, head_dim=4, clf_hidden=8,
                    pretrain_epochs=3, triplets_per_epoch=64, finetune_epochs=5, batch_size=16)


def user_rows(n_users, days, rng, spread=0.3, dim=6):
    centres = rng.normal(0, 2, (n_users, dim))
    X = np.vstack([c + rng.normal(0, spread, (days, dim)) for c in centres])
    ids = np.repeat([f"u{i}" for i in range(n_users)], days).astype(object)
    return X, ids


# ---------------------------------------------------------------- config


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(margin=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(sampler="other")
    with pytest.raises(ValueError):
        TrainConfig(input_clip=-1.0)
    cfg = TrainConfig(lr=0.01)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


# ---------------------------------------------------------------- triplets


def test_triplets_small_exhaustible(rng):
    ids = np.array(["a", "a", "b", "b"], dtype=object)
    trip = sample_triplets(ids, 4, rng)
    assert trip.shape == (4, 3)
    for a, p, n in trip:
        assert ids[a] == ids[p] and a != p and ids[n] != ids[a]


def test_triplets_need_two_multiday_users(rng):
    with pytest.raises(TrainingError, match="insufficient pretraining structure"):
        sample_triplets(np.array(["a", "a", "a"], dtype=object), 4, rng)
    with pytest.raises(TrainingError):
        sample_triplets(np.array(["a", "a", "b"], dtype=object), 4, rng)


def test_triplet_validity_over_random_cohorts(rng):
    for _ in range(50):
        n_users = int(rng.integers(2, 8))
        ids = np.repeat(np.arange(n_users), rng.integers(1, 6, n_users))
        rng.shuffle(ids)
        if (np.bincount(ids) >= 2).sum() < 2:
            continue
        for a, p, n in sample_triplets(ids, 100, rng):
            assert ids[a] == ids[p] and a != p and ids[n] != ids[a]
            assert np.sum(ids == ids[a]) >= 2


def test_anchor_distribution_is_uniform_over_eligible_users(rng):
    ids = np.repeat(np.arange(5), [1, 2, 5, 9, 3])  # user 0 is ineligible
    trip = sample_triplets(ids, 10_000, rng)
    counts = np.bincount(ids[trip[:, 0]], minlength=5)
    assert counts[0] == 0
    expected, sd = 10_000 / 4, np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts[1:] - expected) < 3 * sd)


def test_negative_uniform_over_other_rows(rng):
    ids = np.array([0, 0, 1, 2, 2, 2, 2])
    trip = sample_triplets(ids, 20_000, rng)
    neg_rows = trip[ids[trip[:, 0]] == 0, 2]
    counts = np.bincount(neg_rows, minlength=7)[2:]
    n = counts.sum()
    assert np.all(np.abs(counts - n / 5) < 3 * np.sqrt(n * 0.2 * 0.8))


# ---------------------------------------------------------------- pretraining


def test_full_pretrain_objective_gradient(rng):
    X, ids = user_rows(3, 3, rng, dim=5)
    cfg = TrainConfig(embed_hidden=7, embed_dim=4, head_hidden=5, head_dim=3)
    emb, head = init_embedder(5, cfg, rng), C.init_head(cfg, rng)
    for layer in emb.layers + head.layers:
        layer.b[:] = rng.normal(0, 0.5, layer.b.shape)  # zero biases put rows on ReLU kinks
    trip = sample_triplets(ids, 6, rng)

    def fn(params):
        return C.triplet_objective(emb, head, X, trip, 10.0)  # every hinge active

    assert grad_check(fn, emb.params() + head.params()) < 1e-4


def test_classification_objective_gradient(rng):
    cfg = TrainConfig(embed_hidden=7, embed_dim=4, clf_hidden=5)
    emb, clf = init_embedder(5, cfg, rng), init_classifier(cfg, rng)
    for layer in emb.layers + clf.layers:
        layer.b[:] = rng.normal(0, 0.5, layer.b.shape)
    X, y = rng.normal(size=(9, 5)), rng.integers(0, 2, 9)

    def fn(params):
        return C.classification_objective(emb, clf, X, y, 2.5)

    assert grad_check(fn, emb.params() + clf.params()) < 1e-4


def test_zero_epochs_returns_initial_networks(rng):
    X, ids = user_rows(4, 3, rng)
    cfg = TrainConfig(pretrain_epochs=0)
    res = pretrain(X, ids, cfg, make_rng(9))
    ref = init_embedder(X.shape[1], cfg, make_rng(9))
    for a, b in zip(res.embedder.params(), ref.params()):
        assert np.array_equal(a, b)
    assert res.history == []


def test_identical_rows_loss_tends_to_margin(rng):
    X = np.ones((12, 4))
    ids = np.repeat(["a", "b", "c"], 4).astype(object)
    res = pretrain(X, ids, TrainConfig(pretrain_epochs=5, embed_hidden=8, embed_dim=4), make_rng(0))
    assert res.history[-1]["loss"] == pytest.approx(1.0, abs=1e-9)


def test_probe_loss_does_not_increase(rng):
    X, ids = user_rows(8, 5, rng, spread=2.0)
    res = pretrain(X, ids, TrainConfig(pretrain_epochs=8, triplets_per_epoch=256), make_rng(1))
    probe = [h["probe_loss"] for h in res.history]
    for before, after in zip(probe, probe[1:]):
        assert after <= before * 1.05 + 1e-9
    assert probe[-1] < probe[0]


def test_pretraining_clusters_users(rng):
    X, ids = user_rows(10, 5, rng, spread=1.0)
    cfg = TrainConfig(pretrain_epochs=10)
    res = pretrain(X, ids, cfg, make_rng(2))
    before = separation_ratio(X, ids, init_embedder(X.shape[1], cfg, make_rng(2)))
    assert separation_ratio(X, ids, res.embedder) < before


def test_pretrain_rejects_divergence(rng):
    X, ids = user_rows(3, 3, rng)
    X[0, 0] = np.inf
    with pytest.raises(TrainingError, match="diverged"), np.errstate(invalid="ignore"):
        pretrain(X, ids, SMALL, make_rng(0))


# ---------------------------------------------------------------- separation ratio


def test_separation_ratio_examples(rng):
    E = np.repeat(rng.normal(size=(4, 3)), 3, axis=0)
    ids = np.repeat(np.arange(4), 3)
    assert separation_ratio(E, ids) == 0
    with pytest.raises(ValueError, match="degenerate embeddings"):
        separation_ratio(np.ones((6, 2)), np.repeat([0, 1], 3))
    with pytest.raises(ValueError):
        separation_ratio(rng.normal(size=(3, 2)), np.arange(3))


def test_separation_ratio_random_is_near_one(rng):
    ratios = [separation_ratio(rng.normal(size=(50, 8)), np.repeat(np.arange(10), 5)) for _ in range(20)]
    assert abs(np.mean(ratios) - 1) < 0.15


def test_separation_ratio_oracle(rng):
    E = rng.normal(size=(9, 2))
    ids = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
    intra, inter = [], []
    for i in range(9):
        for j in range(i + 1, 9):
            (intra if ids[i] == ids[j] else inter).append(np.linalg.norm(E[i] - E[j]))
    assert separation_ratio(E, ids) == pytest.approx(np.mean(intra) / np.mean(inter), rel=1e-12)


# ---------------------------------------------------------------- sampler & split


def test_weighted_sampler_balances_classes(rng):
    y = np.array([0] * 75 + [1] * 25)
    draws = draw_rows(sampler_cdf(y, "weighted"), 10_000, rng)
    assert abs(y[draws].mean() - 0.5) < 0.02


def test_uniform_sampler_keeps_class_ratio(rng):
    y = np.array([0] * 75 + [1] * 25)
    draws = draw_rows(sampler_cdf(y, "uniform"), 10_000, rng)
    assert abs(y[draws].mean() - 0.25) < 0.02


def test_sampler_rejects_single_class():
    with pytest.raises(TrainingError):
        sampler_cdf(np.zeros(5), "weighted")


def test_validation_split_is_stratified_and_user_level(rng):
    users = [f"u{i}" for i in range(40)]
    labels = np.array([1] * 12 + [0] * 28)
    train, val = split_validation_users(users, labels, 0.1, rng)
    assert len(val) == 4 and set(train).isdisjoint(val) and set(train) | set(val) == set(users)
    lab = dict(zip(users, labels))
    assert sum(lab[u] for u in val) == 1
    assert split_validation_users(users, labels, 0.0, rng) == (users, [])


# ---------------------------------------------------------------- fine-tuning


def test_finetune_separable_reaches_perfect_training_accuracy(rng):
    X, ids = user_rows(20, 4, rng, dim=4)
    y_user = (np.arange(20) < 7).astype(int)
    X[:, 0] += np.repeat(np.where(y_user == 1, 6.0, -6.0), 4)
    y = np.repeat(y_user, 4)
    cfg = TrainConfig(finetune_epochs=50, val_fraction=0.0)
    emb = init_embedder(4, cfg, make_rng(0))
    model = finetune(emb, X, ids, y, cfg, make_rng(1))
    assert balanced_accuracy(confusion(model.predict_normalized(X), y)) == 1.0


def test_finetune_null_signal(rng):
    scores = []
    for seed in range(10):
        r = make_rng(seed)
        X, ids = user_rows(40, 4, r, dim=5)
        y = np.repeat(r.permutation(np.r_[np.ones(14), np.zeros(26)]).astype(int), 4)
        model = finetune(init_embedder(5, SMALL, r), X, ids, y, SMALL.replace(finetune_epochs=10), r)
        scores.append(max(h["val_balanced_accuracy"] for h in model.history))
        assert model.history and all(h["val_balanced_accuracy"] is not None for h in model.history)
    held_out = []
    for seed in range(10):
        r = make_rng(100 + seed)
        X, ids = user_rows(60, 4, r, dim=5)
        y_user = r.permutation(np.r_[np.ones(20), np.zeros(40)]).astype(int)
        tr = np.repeat(np.arange(60) < 40, 4)
        model = finetune(init_embedder(5, SMALL, r), X[tr], ids[tr], np.repeat(y_user, 4)[tr], SMALL, r)
        probs = [model.predict_normalized(X[ids == f"u{i}"]).mean() for i in range(40, 60)]
        held_out.append(balanced_accuracy(confusion(np.array(probs), y_user[40:])))
    assert 0.35 <= np.mean(held_out) <= 0.65


def test_finetune_degenerate_labels(rng):
    X, ids = user_rows(4, 3, rng)
    with pytest.raises(TrainingError, match="degenerate labels"):
        finetune(init_embedder(X.shape[1], SMALL, rng), X, ids, np.zeros(12, dtype=int), SMALL, rng)


def test_finetune_does_not_modify_embedder(rng):
    X, ids = user_rows(10, 3, rng)
    y = np.repeat(np.arange(10) % 2, 3)
    emb = init_embedder(X.shape[1], SMALL, rng)
    before = [p.copy() for p in emb.params()]
    finetune(emb, X, ids, y, SMALL, rng)
    assert all(np.array_equal(a, b) for a, b in zip(before, emb.params()))


def test_frozen_embedder_option(rng):
    X, ids = user_rows(10, 3, rng)
    y = np.repeat(np.arange(10) % 2, 3)
    emb = init_embedder(X.shape[1], SMALL, rng)
    model = finetune(emb, X, ids, y, SMALL.replace(joint_finetune=False, val_fraction=0.0), rng)
    assert all(np.array_equal(a, b) for a, b in zip(emb.params(), model.embedder.params()))


def test_unit_weight_uniform_sampler_is_plain_bce(rng, monkeypatch):
    X, ids = user_rows(12, 3, rng)
    y = np.repeat(np.arange(12) % 3 == 0, 3).astype(int)
    cfg = SMALL.replace(sampler="uniform", positive_weight=1.0)
    emb = init_embedder(X.shape[1], cfg, make_rng(0))
    weighted = finetune(emb, X, ids, y, cfg, make_rng(5))

    def plain_bce(z, labels, _w):
        p = 1 / (1 + np.exp(-z))
        loss = float(np.mean(np.logaddexp(0, -z) * labels + np.logaddexp(0, z) * (1 - labels)))
        return loss, (p - labels) / len(z)

    monkeypatch.setattr(C, "weighted_bce", plain_bce)
    plain = finetune(emb, X, ids, y, cfg, make_rng(5))
    for a, b in zip(weighted.classifier.params() + weighted.embedder.params(),
                    plain.classifier.params() + plain.embedder.params()):
        assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_default_positive_weight_is_class_ratio(rng, monkeypatch):
    X, ids = user_rows(12, 3, rng)
    y = np.repeat(np.arange(12) % 4 == 0, 3).astype(int)
    seen = set()

    def spy(z, labels, w):
        seen.add(w)
        return weighted_bce(z, labels, w)

    monkeypatch.setattr(C, "weighted_bce", spy)
    finetune(init_embedder(X.shape[1], SMALL, rng), X, ids, y, SMALL.replace(val_fraction=0.0), rng)
    assert seen == {27 / 9}


def test_training_log_fields(rng):
    X, ids = user_rows(20, 3, rng)
    y = np.repeat(np.arange(20) % 2, 3)
    model = finetune(init_embedder(X.shape[1], SMALL, rng), X, ids, y, SMALL, rng)
    assert set(model.history[0]) == {"epoch", "loss", "val_balanced_accuracy"}


# ---------------------------------------------------------------- prediction


class FixedModel:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def predict_rows(self, rows):
        return self.probs[: len(rows)]


def test_predict_user_examples(rng):
    assert predict_user(FixedModel([0.2, 0.8]), np.zeros((2, 3))) == pytest.approx(0.5)
    assert predict_user(FixedModel([0.9]), np.zeros((1, 3))) == pytest.approx(0.9)
    p = rng.random(14)
    assert predict_user(FixedModel(p), np.zeros((14, 3))) == pytest.approx(sum(p) / 14, rel=1e-12)
    with pytest.raises(ValueError, match="no data for user"):
        predict_user(FixedModel([]), np.zeros((0, 3)))


def test_predict_user_row_order_invariant(rng):
    X, ids = user_rows(10, 3, rng)
    y = np.repeat(np.arange(10) % 2, 3)
    model = train_model(X, ids, y, SMALL, 1, 2)
    rows = rng.normal(size=(7, X.shape[1]))
    assert predict_user(model, rows) == pytest.approx(predict_user(model, rows[rng.permutation(7)]), rel=1e-12)


def test_model_save_load(tmp_path, rng):
    X, ids = user_rows(10, 3, rng)
    X[0, 1] = np.nan
    y = np.repeat(np.arange(10) % 2, 3)
    model = train_model(X, ids, y, SMALL, 1, 2)
    model.feature_names = [f"f{i}" for i in range(X.shape[1])]
    save_model(tmp_path / "m.json", model, SMALL)
    again = load_model(tmp_path / "m.json")
    assert np.array_equal(model.predict_rows(X), again.predict_rows(X))
    assert again.norm.clip == SMALL.input_clip and again.feature_names == model.feature_names


def test_trained_model_width_check(rng):
    with pytest.raises(ValueError):
        TrainedModel(init_embedder(4, SMALL, rng), init_classifier(SMALL.replace(embed_dim=3), rng))
