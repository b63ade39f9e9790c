import math

import numpy as np
import pytest
from scipy import stats

from conequery import geometry as geo
from conequery import ops
from conequery.autodiff import Tensor
from conequery.errors import UsageError
from conequery.evaluate import (aperture_cardinality_analysis, demorgan_discrepancy_experiment,
                                empty_intersection_experiment, empty_intersection_from_apertures,
                                filtered_rank, intersection_overlap_experiment,
                                membership_precision_recall, mid_ranks, mrr, mrr_from_distances,
                                nested_pairs, pearson, projection_containment_experiment,
                                query_distances, random_baseline, roc_auc, semantic_average_equal,
                                spearman)
from conequery.oracle import DatasetQuery
from conequery.query import parse
from conequery.synthetic import random_kg

PI = math.pi


def q1p(anchor, hard, easy=(), structure="1p"):
    return DatasetQuery(parse(f"(p 0 (e {anchor}))"), structure, frozenset(easy), frozenset(hard))


def fixed_cone_params(entity_axes, aperture_logit=0.0, d=4):
    """Projection network zeroed so every 1p query embeds to axis 0 with a chosen aperture."""
    params = ops.ModelParams.init(len(entity_axes), 1, d, 6, np.random.default_rng(0))
    params.entity_axes = Tensor(np.asarray(entity_axes, dtype=float), requires_grad=True)
    mlp = params.projection_mlp
    for i in range(len(mlp.weights)):
        mlp.weights[i] = Tensor(np.zeros(mlp.weights[i].shape), requires_grad=True)
        mlp.biases[i] = Tensor(np.zeros(mlp.biases[i].shape), requires_grad=True)
    mlp.biases[-1] = Tensor(np.concatenate([np.zeros(d), np.full(d, aperture_logit)]), requires_grad=True)
    return params


# ranks

def _ranks_by_sorting(row, hard, filtered):
    # reference: sort candidates once, then count by linear passes
    keep = [i for i in range(len(row)) if i not in filtered]
    out = []
    for h in sorted(hard):
        cands = sorted([row[i] for i in keep] + [row[h]])
        first = cands.index(row[h])
        last = len(cands) - 1 - cands[::-1].index(row[h])
        out.append(1 + first + (last - first) / 2)
    return out


def test_mid_ranks_match_sorting_reference(rng):
    for _ in range(200):
        n = rng.integers(3, 40)
        row = rng.integers(0, 6, n).astype(float)  # many ties
        ids = rng.permutation(n)
        hard = set(ids[: rng.integers(1, 4)].tolist())
        easy = set(ids[4: 4 + rng.integers(0, 4)].tolist())
        got = mid_ranks(row, hard, hard | easy)[1]
        assert np.allclose(got, _ranks_by_sorting(row, hard, hard | easy), rtol=0, atol=1e-12)


def test_rank_examples():
    row = np.array([0.1, 0.5, 0.7, 0.9])
    assert mid_ranks(row, {0}, {0})[1].tolist() == [1.0]
    tied = np.zeros(8)
    # v tied with all n = 7 non-answers: (n + 2) / 2
    assert mid_ranks(tied, {0}, {0})[1].tolist() == [4.5]
    # other hard answers are filtered, not competitors
    assert mid_ranks(row, {2, 3}, {2, 3})[1].tolist() == [3.0, 3.0]


def test_mid_rank_is_expected_rank_under_random_tie_breaking(rng):
    # random tie-breaking gives the mid-rank in expectation
    row = np.array([0.0, 0.2, 0.2, 0.2, 0.2, 0.5, 0.2, 0.9])
    hard = {1}
    mid = mid_ranks(row, hard, hard)[1][0]
    trials = 20000
    draws = np.empty(trials)
    tied = int(np.sum(row[2:] == 0.2))
    below = int(np.sum(row[2:] < 0.2)) + int(row[0] < 0.2)
    for t in range(trials):
        draws[t] = 1 + below + rng.integers(0, tied + 1)
    se = draws.std() / math.sqrt(trials)
    assert abs(draws.mean() - mid) < 4 * se


def test_filtered_rank_requires_hard_answer(small_params):
    q = q1p(1, {2}, {3})
    with pytest.raises(UsageError):
        filtered_rank(3, q, small_params)
    r = filtered_rank(2, q, small_params)
    assert 1.0 <= r.rank <= small_params.n_entities - 1


def test_mrr_formula():
    queries = [q1p(0, {1}), q1p(0, {2}), q1p(0, {3})]
    dists = np.array([[5, 0, 9, 9, 9, 9],
                      [5, 1, 2, 9, 9, 9],
                      [0, 1, 2, 3, 9, 9]], dtype=float)
    # ranks 1, 2, 4
    report = mrr_from_distances(queries, dists)
    assert report.per_structure["1p"] == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-15)
    assert report.pairs == 3


def test_mrr_is_macro_average():
    queries = [q1p(0, {1}), q1p(0, {1}, structure="2p")]
    dists = np.array([[0, 0, 1, 1], [0, 5, 1, 1]], dtype=float)
    report = mrr_from_distances(queries, dists)
    # 1p: v ties with one candidate -> 1 / 1.5; 2p: all three candidates closer -> 1 / 4
    assert report.average == pytest.approx((1 / 1.5 + 1 / 4) / 2, abs=1e-15)


def test_mrr_invariant_to_monotone_transforms(rng):
    queries = [q1p(0, set(rng.choice(20, 3, replace=False).tolist())) for _ in range(10)]
    dists = rng.uniform(0, 4, (10, 20))
    base = mrr_from_distances(queries, dists).average
    for f in (np.exp, lambda x: 3 * x + 7, np.sqrt, lambda x: np.arctan(x) ** 3):
        assert mrr_from_distances(queries, f(dists)).average == pytest.approx(base, abs=1e-15)


def test_perfect_model_scores_one():
    ent = np.full((8, 4), -PI)
    ent[[2, 5]] = 0.0
    params = fixed_cone_params(ent)
    report = mrr([q1p(0, {2, 5}), q1p(3, {2}, {5})], params)
    assert report.average == 1.0


def test_mrr_rejects_empty(small_params):
    with pytest.raises(UsageError):
        mrr([], small_params)


def test_threads_do_not_change_distances(small_params, rng):
    queries = [q1p(int(a), {1}) for a in rng.integers(0, 12, 9)]
    one = query_distances(queries, small_params)
    assert np.array_equal(one, query_distances(queries, small_params, threads=3))


def test_distances_ignore_answer_sets(small_params):
    # embeddings read only the parameters, never the graph
    a = query_distances([q1p(4, {1})], small_params)
    b = query_distances([q1p(4, {2, 3}, {7})], small_params)
    assert np.array_equal(a, b)


def test_random_baseline():
    assert random_baseline(1) == 1.0
    # the quoted 0.0750 is truncated; the exact value is 0.075057
    assert random_baseline(63) == pytest.approx(0.0750, abs=1e-4)
    harmonic = sum(1 / k for k in range(1, 64))
    assert random_baseline(63) == pytest.approx(harmonic / 63, abs=1e-15)
    # the expected reciprocal rank of a uniform random position
    rng = np.random.default_rng(0)
    draws = 1.0 / rng.integers(1, 64, 200000)
    assert abs(draws.mean() - random_baseline(63)) < 4 * draws.std() / math.sqrt(draws.size)
    with pytest.raises(ValueError):
        random_baseline(0)


# correlations

def test_correlation_examples():
    x = np.arange(10.0)
    assert pearson(x, 2 * x).value == pytest.approx(1.0, abs=1e-15)
    assert spearman(x, 2 * x).value == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, x[::-1]).value == pytest.approx(-1.0, abs=1e-15)
    assert spearman(x, x[::-1]).value == pytest.approx(-1.0, abs=1e-15)
    c = spearman(np.ones(5), x[:5])
    assert c == (0.0, True)


def _pearson_textbook(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _midranks_textbook(x):
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def test_correlations_match_textbook_formulas(rng):
    for _ in range(20):
        x = rng.normal(size=100).tolist()
        y = (np.array(x) * rng.uniform(-2, 2) + rng.normal(size=100)).round(1).tolist()
        assert abs(pearson(x, y).value - _pearson_textbook(x, y)) < 1e-10
        want = _pearson_textbook(_midranks_textbook(x), _midranks_textbook(y))
        assert abs(spearman(x, y).value - want) < 1e-10
        assert abs(spearman(x, y).value - stats.spearmanr(x, y).statistic) < 1e-10


def test_aperture_cardinality_monotone():
    # a single positive path carries the anchor's first axis coordinate to every
    # aperture logit, so the learned aperture grows with the anchor id, as do the answer counts
    params = fixed_cone_params(np.zeros((10, 4)))
    mlp = params.projection_mlp
    w = np.zeros(mlp.weights[0].shape)
    w[0, 0] = 1.0
    mlp.weights[0] = Tensor(w, requires_grad=True)
    mlp.biases[0] = Tensor(np.full(mlp.biases[0].shape, 5.0), requires_grad=True)  # keeps the relu active
    w1 = np.zeros(mlp.weights[1].shape)
    w1[0, 0] = 1.0
    mlp.weights[1] = Tensor(w1, requires_grad=True)
    w2 = np.zeros(mlp.weights[2].shape)
    w2[0, 4:] = 0.1
    mlp.weights[2] = Tensor(w2, requires_grad=True)
    params.relation_embeddings = Tensor(np.zeros((1, 8)), requires_grad=True)
    params.entity_axes = Tensor(np.tile(np.linspace(-3, 3, 10)[:, None], (1, 4)), requires_grad=True)
    queries = [q1p(a, set(range(a + 1))) for a in range(9)]
    reports = aperture_cardinality_analysis(queries, params)
    assert len(reports) == 1
    assert reports[0].spearman == pytest.approx(1.0, abs=1e-12) and not reports[0].degenerate
    assert -1 <= reports[0].pearson <= 1


def test_aperture_cardinality_constant_is_degenerate():
    params = fixed_cone_params(np.zeros((6, 4)))
    queries = [q1p(a, set(range(a + 1))) for a in range(5)]
    (report,) = aperture_cardinality_analysis(queries, params)
    assert report.spearman == 0.0 and report.degenerate


def test_aperture_cardinality_skips_unions(small_params):
    q = DatasetQuery(parse("(u (p 0 (e 1)) (p 1 (e 2)))"), "2u", frozenset(), frozenset({3}))
    assert aperture_cardinality_analysis([q, q], small_params) == []


# experiments

def test_roc_auc_against_pairwise_count(rng):
    for _ in range(20):
        pos = rng.integers(0, 10, rng.integers(1, 30)).astype(float)
        neg = rng.integers(0, 10, rng.integers(1, 30)).astype(float)
        want = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
        assert roc_auc(pos, neg) == pytest.approx(want, abs=1e-12)


def test_empty_intersection_separable():
    rep = empty_intersection_from_apertures(np.full((20, 4), PI), np.zeros((15, 4)))
    assert rep.roc_auc == 1.0
    assert rep.mean_aperture_nonempty == pytest.approx(PI) and rep.mean_aperture_empty == 0.0


def test_experiment_ratios_in_unit_interval(small_params, rng):
    for f in (projection_containment_experiment, intersection_overlap_experiment,
              demorgan_discrepancy_experiment):
        r = f(small_params, 200, rng)
        assert 0.0 <= r <= 1.0, f.__name__
    dense = random_kg(40, 2, 700, np.random.default_rng(6))
    params = ops.ModelParams.init(40, 2, 4, 8, np.random.default_rng(1))
    rep = empty_intersection_experiment(dense.test, params, 30, rng)
    assert rep.n_nonempty > 0 and rep.n_empty > 0
    assert 0.0 <= rep.roc_auc <= 1.0


def test_empty_intersection_partial_report():
    rep = empty_intersection_from_apertures(np.zeros((0, 4)), np.ones((3, 4)))
    assert rep.n_nonempty == 0 and rep.n_empty == 3
    assert math.isnan(rep.roc_auc) and math.isnan(rep.mean_aperture_nonempty)
    assert rep.mean_aperture_empty == 1.0


def test_identical_pairs_contain_fully(small_params, rng):
    a, b = nested_pairs(rng, 50, 4, shrink=(1.0, 1.0))
    assert np.allclose(a.apertures, b.apertures)
    pa = ops.to_cone_batch(ops.project(ops.from_cone_batch(a), [0] * 50, small_params))
    assert np.allclose(geo.containment_ratio(pa, pa), 1.0)


def test_nested_pairs_are_nested(rng):
    a, b = nested_pairs(rng, 500, 3)
    assert np.allclose(geo.containment_ratio(a, b), 1.0)


def test_membership_precision_recall_perfect():
    ent = np.full((8, 4), -PI)
    ent[[1, 6]] = 0.0
    params = fixed_cone_params(ent)
    pr = membership_precision_recall([q1p(0, {1, 6})], params)
    assert (pr.precision, pr.recall, pr.no_predictions) == (1.0, 1.0, False)


def test_membership_predict_nothing():
    # aperture squashed to zero, entities on the far side of the circle
    params = fixed_cone_params(np.full((8, 4), -PI), aperture_logit=-40.0)
    pr = membership_precision_recall([q1p(0, {1, 6})], params)
    assert (pr.precision, pr.recall, pr.no_predictions) == (0.0, 0.0, True)


def test_semantic_average_equal_wraps():
    got = semantic_average_equal(np.array([[PI - 0.1], [-PI + 0.2]]))[0]
    assert got == pytest.approx(-PI + 0.05, abs=1e-12)
