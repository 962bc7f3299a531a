"""Annotation, KNN and average-precision tests (exhaustive AP oracle inside)."""

from itertools import combinations, product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridinsight import annotate
from gridinsight.data import PgpmDataset
from gridinsight.latent import Representation

from oracles import brute_force_ap


def rep(mu, source_id=None):
    mu = np.asarray(mu, dtype=float)
    return Representation(mu, np.ones_like(mu), source_id)


def make_registry(prototype_mus):
    registry = annotate.InsightRegistry(dim=len(prototype_mus[0]))
    for j, mu in enumerate(prototype_mus):
        registry.add(annotate.InsightRecord(f"ins-{j}", f"insight {j}", "", rep(mu)))
    return registry


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

def test_registry_crud():
    registry = make_registry([[0.0, 0.0], [1.0, 1.0]])
    assert [r.id for r in registry.list()] == ["ins-0", "ins-1"]
    registry.update(annotate.InsightRecord("ins-0", "renamed", "desc", rep([2.0, 2.0])))
    assert registry.get("ins-0").name == "renamed"
    registry.remove("ins-1")
    assert [r.id for r in registry.list()] == ["ins-0"]
    with pytest.raises(KeyError):
        registry.remove("ins-1")
    with pytest.raises(KeyError):
        registry.update(annotate.InsightRecord("ghost", "x", "", rep([0.0, 0.0])))


def test_registry_rejects_duplicates_and_bad_dim():
    registry = make_registry([[0.0, 0.0]])
    with pytest.raises(ValueError):
        registry.add(annotate.InsightRecord("ins-0", "again", "", rep([1.0, 1.0])))
    with pytest.raises(ValueError):
        registry.add(annotate.InsightRecord("ins-9", "bad", "", rep([1.0, 1.0, 1.0])))


def test_registry_jsonl_roundtrip():
    registry = make_registry([[0.5, -0.5], [2.0, 0.0]])
    registry.get("ins-0").thumbnail = np.array([[0.1, 0.9]])
    text = registry.to_jsonl()
    back = annotate.InsightRegistry.from_jsonl(text, dim=2)
    assert [r.id for r in back.list()] == ["ins-0", "ins-1"]
    np.testing.assert_array_equal(back.get("ins-0").thumbnail, [[0.1, 0.9]])
    np.testing.assert_array_equal(back.get("ins-1").prototype.mu, [2.0, 0.0])


# ---------------------------------------------------------------------------
# unsupervised similarity
# ---------------------------------------------------------------------------

def test_similarity_one_at_prototype():
    registry = make_registry([[1.0, 2.0], [5.0, 5.0]])
    results = annotate.unsupervised_annotate([rep([1.0, 2.0], "s0")], registry,
                                             bandwidth=1.0)
    assert results[0].scores[0] == pytest.approx(1.0)
    assert results[0].bits[0]
    assert results[0].sample_id == "s0"


def test_similarity_vanishes_at_distance():
    registry = make_registry([[0.0, 0.0]])
    far = annotate.unsupervised_annotate([rep([1e4, 1e4])], registry, bandwidth=1.0)
    assert far[0].scores[0] == pytest.approx(0.0, abs=1e-300)
    assert not far[0].bits[0]


def test_similarity_strictly_decreasing_and_scale_free():
    d = np.array([0.0, 0.5, 1.0, 2.0, 5.0])
    s = annotate.similarity_kernel(d, 1.3)
    assert np.all(np.diff(s) < 0)
    np.testing.assert_allclose(annotate.similarity_kernel(3.0 * d, 3.0 * 1.3), s)
    with pytest.raises(ValueError):
        annotate.similarity_kernel(d, 0.0)


def test_unsupervised_requires_registry_and_valid_threshold():
    with pytest.raises(ValueError):
        annotate.unsupervised_annotate([rep([0.0])], annotate.InsightRegistry(1))
    registry = make_registry([[0.0]])
    with pytest.raises(ValueError):
        annotate.unsupervised_annotate([rep([0.0])], registry, threshold=1.0)


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

def test_knn_exact_match_k1():
    x = np.array([[0.0, 0.0], [5.0, 5.0]])
    y = np.array([[True, False], [False, True]])
    bits, scores = annotate.knn_semi_supervised(x, y, np.array([[5.0, 5.0]]), k=1)
    np.testing.assert_array_equal(bits[0], [False, True])
    np.testing.assert_array_equal(scores[0], [0.0, 1.0])


def test_knn_unanimous_and_split_votes():
    x = np.array([[0.0], [0.1], [0.2], [0.3]])
    y = np.array([[True], [True], [False], [False]])
    bits, scores = annotate.knn_semi_supervised(x, y, np.array([[0.15]]), k=4)
    assert scores[0, 0] == pytest.approx(0.5)
    assert bits[0, 0]  # score 0.5 meets the >= 0.5 convention
    y_all = np.array([[True]] * 4)
    _, scores = annotate.knn_semi_supervised(x, y_all, np.array([[0.15]]), k=4)
    assert scores[0, 0] == 1.0


def test_knn_tie_break_by_lower_index():
    x = np.array([[1.0], [1.0]])  # equidistant from the query
    y = np.array([[True], [False]])
    _, scores = annotate.knn_semi_supervised(x, y, np.array([[0.0]]), k=1)
    assert scores[0, 0] == 1.0  # index 0 wins the tie


def test_knn_translation_invariance():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (12, 3))
    y = rng.uniform(size=(12, 2)) < 0.5
    q = rng.uniform(-1, 1, (5, 3))
    shift = np.array([100.0, -40.0, 7.0])
    bits_a, scores_a = annotate.knn_semi_supervised(x, y, q, k=4)
    bits_b, scores_b = annotate.knn_semi_supervised(x + shift, y, q + shift, k=4)
    np.testing.assert_allclose(scores_a, scores_b)
    np.testing.assert_array_equal(bits_a, bits_b)


def test_knn_errors():
    x = np.zeros((2, 1))
    y = np.zeros((2, 1), dtype=bool)
    with pytest.raises(ValueError):
        annotate.knn_semi_supervised(x, y, np.zeros((1, 1)), k=3)
    with pytest.raises(ValueError):
        annotate.knn_semi_supervised(np.zeros((0, 1)), np.zeros((0, 1), dtype=bool),
                                     np.zeros((1, 1)), k=1)


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def test_ap_all_positives_first():
    assert annotate.average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0


def test_ap_hand_pattern_five_sixths():
    # ranking by score gives truth pattern [1, 0, 1]
    ap = annotate.average_precision([0.9, 0.5, 0.2], [True, False, True])
    assert ap == pytest.approx(5.0 / 6.0)


def test_ap_requires_positives():
    with pytest.raises(ValueError):
        annotate.average_precision([0.5, 0.2], [False, False])


def test_ap_matches_exhaustive_oracle_up_to_length_8():
    rng = np.random.default_rng(33)
    for n in range(1, 9):
        for bits in product([False, True], repeat=n):
            if not any(bits):
                continue
            for scores in (
                np.linspace(1.0, 0.0, n),
                np.zeros(n),
                rng.uniform(size=n),
                np.round(rng.uniform(size=n) * 3) / 3.0,  # heavy ties
            ):
                ours = annotate.average_precision(scores, bits)
                oracle = brute_force_ap(list(scores), list(bits))
                assert ours == pytest.approx(oracle, abs=1e-12), (n, bits, scores)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=30))
def test_ap_invariant_under_monotone_transforms(pairs):
    # quantized so the affine/exp transforms below stay injective in float64
    scores = np.round(np.array([p[0] for p in pairs]), 6)
    truth = np.array([p[1] for p in pairs])
    if not truth.any():
        truth[0] = True
    base = annotate.average_precision(scores, truth)
    assert annotate.average_precision(3.0 * scores + 2.0, truth) == pytest.approx(base)
    assert annotate.average_precision(np.exp(scores), truth) == pytest.approx(base)


def test_constant_score_ap_averaged_over_placements():
    """With constant scores the permutation-averaged AP exceeds prevalence by a
    finite-n bias that the exhaustive oracle pins down and that shrinks with n."""
    gaps = []
    for n in (2, 4, 8):
        p = n // 2
        ours, oracle = [], []
        for pos in combinations(range(n), p):
            truth = np.array([i in pos for i in range(n)])
            ours.append(annotate.average_precision(np.zeros(n), truth))
            oracle.append(brute_force_ap([0.0] * n, list(truth)))
        assert np.mean(ours) == pytest.approx(np.mean(oracle), abs=1e-12)
        gap = np.mean(ours) - p / n
        assert gap >= 0.0
        gaps.append(gap)
    assert gaps[0] > gaps[1] > gaps[2]  # bias decays toward prevalence


def test_map_and_mean_accuracy():
    assert annotate.mean_average_precision([1.0, 0.5]) == pytest.approx(0.75)
    assert annotate.mean_average_precision([0.7]) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        annotate.mean_average_precision([np.nan])
    pred = np.array([[True, False], [True, True]])
    truth = np.array([[True, True], [True, True]])
    assert annotate.mean_accuracy(pred, truth) == pytest.approx(0.75)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def planted_dataset_and_reps(n=160, k=3, seed=0):
    """Labels drive the mean vectors, so annotation is learnable by construction."""
    rng = np.random.default_rng(seed)
    labels = rng.uniform(size=(n, k)) < 0.4
    labels[~labels.any(axis=1), 0] = True
    directions = np.eye(k) * 4.0
    mus = labels @ directions + 0.3 * rng.standard_normal((n, k))
    reps = [rep(mus[i], f"s{i:04d}") for i in range(n)]
    grids = np.zeros((n, 2, 2))
    ds = PgpmDataset(grids, labels, [f"s{i:04d}" for i in range(n)], 0.01,
                     tuple(f"c{j}" for j in range(k)))
    return ds, reps


def test_cross_validate_deterministic():
    ds, reps = planted_dataset_and_reps()
    a = annotate.cross_validate(ds, None, "knn", folds=4, label_fraction=1.0,
                                seed=5, reps=reps)
    b = annotate.cross_validate(ds, None, "knn", folds=4, label_fraction=1.0,
                                seed=5, reps=reps)
    assert a.fold_maps == b.fold_maps
    np.testing.assert_array_equal(a.per_class_mean, b.per_class_mean)


def test_cross_validate_planted_structure_beats_random():
    ds, reps = planted_dataset_and_reps()
    unsup = annotate.cross_validate(ds, None, "unsupervised", folds=4, seed=1, reps=reps)
    knn = annotate.cross_validate(ds, None, "knn", folds=4, seed=1, reps=reps)
    rand = annotate.cross_validate(ds, None, "random", folds=4, seed=1, reps=reps)
    assert unsup.map_mean > rand.map_mean + 0.2
    assert knn.map_mean > rand.map_mean + 0.2


def test_cross_validate_label_fraction_trend():
    ds, reps = planted_dataset_and_reps(n=240, seed=3)
    low = annotate.cross_validate(ds, None, "knn", folds=4, label_fraction=0.05,
                                  seed=2, reps=reps)
    high = annotate.cross_validate(ds, None, "knn", folds=4, label_fraction=1.0,
                                   seed=2, reps=reps)
    assert high.map_mean >= low.map_mean - (low.map_std + high.map_std)


def test_cross_validate_validation_errors():
    ds, reps = planted_dataset_and_reps(n=40)
    with pytest.raises(ValueError):
        annotate.cross_validate(ds, None, "nope", reps=reps)
    with pytest.raises(ValueError):
        annotate.cross_validate(ds, None, "knn", label_fraction=0.0, reps=reps)
    with pytest.raises(ValueError):
        annotate.cross_validate(ds, None, "knn", folds=1, reps=reps)


def test_format_table_shape():
    ds, reps = planted_dataset_and_reps(n=60)
    result = annotate.cross_validate(ds, None, "knn", folds=3, seed=0, reps=reps)
    table = result.format_table(ds.insight_names)
    lines = table.splitlines()
    assert len(lines) == 2
    assert "mAP" in lines[0] and "P1" in lines[0]
