"""Filtered-rank MRR and the aperture / set-operation analyses.

Ranking uses the mid-rank convention: a hard answer tied with ``t`` filtered
candidates gets rank ``1 + (#strictly closer) + t / 2``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import geometry as geo
from . import ops
from .errors import UsageError
from .ops import ScaleConfig
from .query import EmbedConfig, embed_many, template, to_dnf

DISJUNCTIVE = ("2u", "up")


@dataclass(frozen=True)
class RankResult:
    query: int
    answer: int
    rank: float

    @property
    def reciprocal(self):
        return 1.0 / self.rank


def random_baseline(n_candidates: int) -> float:
    """Expected reciprocal rank ``H_n / n`` of a uniformly random ranking."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    return sum(1.0 / k for k in range(1, n_candidates + 1)) / n_candidates


def mid_ranks(dist_row, hard, filtered):
    """Ranks of every ``hard`` entity against the non-``filtered`` entities."""
    mask = np.ones(dist_row.shape[0], dtype=bool)
    mask[list(filtered)] = False
    others = np.sort(dist_row[mask])
    hard = np.asarray(sorted(hard), dtype=np.intp)
    dh = dist_row[hard]
    below = np.searchsorted(others, dh, side="left")
    ties = np.searchsorted(others, dh, side="right") - below
    return hard, 1.0 + below + ties / 2.0


def distance_matrix(axes, aps, mask, entity_axes, lam, chunk=64):
    """Distances from every query (DNF, padded) to every entity: ``(n_queries, n_entities)``."""
    n = axes.shape[0]
    out = np.empty((n, entity_axes.shape[0]))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        best = None
        for j in range(axes.shape[1]):
            a = axes[lo:hi, j][:, None, :]
            p = aps[lo:hi, j][:, None, :]
            dist = (geo.outside_distance_terms(entity_axes[None], a, p).sum(-1)
                    + lam * geo.inside_distance_terms(entity_axes[None], a, p).sum(-1))
            dist = np.where(mask[lo:hi, j][:, None], dist, np.inf)
            best = dist if best is None else np.minimum(best, dist)
        out[lo:hi] = best
    return out


def query_distances(queries, params, lam=0.02, scale=ScaleConfig(), union="dnf", threads=1):
    """Distance rows for ``queries``; ``threads > 1`` splits them into chunks
    evaluated concurrently and concatenated in input order."""
    graphs = [to_dnf(q.graph) if union == "dnf" else q.graph for q in queries]
    config = EmbedConfig(scale, union=union)

    def run(chunk):
        axes, aps, mask = embed_many(chunk, params, config)
        return distance_matrix(axes, aps, mask, params.entity_axes.data, lam)

    if threads <= 1 or len(graphs) < 2:
        return run(graphs)
    size = math.ceil(len(graphs) / threads)
    chunks = [graphs[i:i + size] for i in range(0, len(graphs), size)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(run, chunks)), axis=0)


def filtered_rank(v, q, params, lam=0.02, scale=ScaleConfig(), query_index=0) -> RankResult:
    """Rank hard answer ``v`` of ``q`` against all non-answers."""
    if v not in q.hard:
        raise UsageError(f"entity {v} is not a hard answer of this query")
    dist = query_distances([q], params, lam, scale)[0]
    _, ranks = mid_ranks(dist, [v], q.answers)
    return RankResult(query_index, v, float(ranks[0]))


@dataclass
class MrrReport:
    per_structure: dict
    average: float
    pairs: int
    ranks: list = field(default_factory=list, repr=False)


def mrr_from_distances(queries, dists) -> MrrReport:
    sums = defaultdict(float)
    counts = defaultdict(int)
    results = []
    for i, (q, row) in enumerate(zip(queries, dists)):
        if not q.hard:
            continue
        hard, ranks = mid_ranks(row, q.hard, q.answers)
        for h, r in zip(hard, ranks):
            results.append(RankResult(i, int(h), float(r)))
        sums[q.structure] += float(np.sum(1.0 / ranks))
        counts[q.structure] += len(ranks)
    per = {k: sums[k] / counts[k] for k in sorted(counts)}
    avg = float(np.mean(list(per.values()))) if per else float("nan")
    return MrrReport(per, avg, sum(counts.values()), results)


def mrr(queries, params, lam=0.02, scale=ScaleConfig(), union="dnf", threads=1) -> MrrReport:
    """Mean reciprocal rank per structure over (query, hard answer) pairs.

    ``average`` is the unweighted mean of the per-structure values.  ``union``
    selects DNF conjunct lists or the single-cone De Morgan form.
    """
    queries = list(queries)
    if not queries:
        raise UsageError("mrr needs at least one query")
    return mrr_from_distances(queries, query_distances(queries, params, lam, scale, union, threads))


# correlations

class Correlation(NamedTuple):
    value: float
    degenerate: bool


def _ranks(x):
    from scipy.stats import rankdata

    return rankdata(x, method="average")


def pearson(xs, ys) -> Correlation:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return Correlation(0.0, True)
    return Correlation(float(np.clip((xc @ yc) / denom, -1.0, 1.0)), False)


def spearman(xs, ys) -> Correlation:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman needs two equal-length samples of size >= 2")
    return pearson(_ranks(x), _ranks(y))


@dataclass(frozen=True)
class CorrelationReport:
    structure: str
    spearman: float
    pearson: float
    samples: int
    degenerate: bool


def aperture_cardinality_analysis(queries, params, scale=ScaleConfig()) -> list:
    """Correlate the L1 norm of learned apertures with true answer counts, per structure.

    Disjunctive structures are skipped.
    """
    by = defaultdict(list)
    for q in queries:
        if q.structure in DISJUNCTIVE:
            continue
        by[q.structure].append(q)
    out = []
    for name in sorted(by):
        qs = by[name]
        if len(qs) < 2:
            continue
        graphs = [to_dnf(q.graph) for q in qs]
        _, aps, _ = embed_many(graphs, params, EmbedConfig(scale))
        learned = aps[:, 0].sum(-1)
        true = np.array([len(q.answers) for q in qs], dtype=np.float64)
        s, p = spearman(learned, true), pearson(learned, true)
        out.append(CorrelationReport(name, s.value, p.value, len(qs), s.degenerate or p.degenerate))
    return out


def roc_auc(positive_scores, negative_scores) -> float:
    """Probability a positive outscores a negative (ties count half)."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    r = _ranks(np.concatenate([pos, neg]))
    u = r[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


# set-operation approximation studies

def random_cones(rng, n, d, ap_range=(0.1, 2 * math.pi - 0.1)):
    axes = rng.uniform(-math.pi, math.pi, (n, d))
    aps = rng.uniform(ap_range[0], ap_range[1], (n, d))
    return geo.ConeBatch(axes, aps)


def nested_pairs(rng, n, d, shrink=(0.2, 0.9)):
    """Pairs ``(a, b)`` with arc ``a`` inside arc ``b`` in every dimension."""
    b = random_cones(rng, n, d)
    aps = b.apertures * rng.uniform(shrink[0], shrink[1], (n, d))
    slack = (b.apertures - aps) / 2
    axes = geo.normalize_angle(b.axes + rng.uniform(-1.0, 1.0, (n, d)) * slack)
    return geo.ConeBatch(axes, aps), b


def _apply_project(c: geo.ConeBatch, rel, params, scale):
    return ops.to_cone_batch(ops.project(ops.from_cone_batch(c), rel, params, scale))


def projection_containment_experiment(params, n_pairs, rng, scale=ScaleConfig()) -> float:
    a, b = nested_pairs(rng, n_pairs, params.dim)
    rel = rng.integers(params.n_relations, size=n_pairs)
    pa = _apply_project(a, rel, params, scale)
    pb = _apply_project(b, rel, params, scale)
    return float(np.mean(geo.containment_ratio(pa, pb)))


def _exact_intersection_jaccard(learned: geo.ConeBatch, c: geo.ConeBatch, d: geo.ConeBatch):
    lengths, (m_l, m_c, m_d) = geo.arc_segments([(learned.lower, learned.apertures),
                                                 (c.lower, c.apertures), (d.lower, d.apertures)])
    exact = m_c & m_d
    inter = np.where(m_l & exact, lengths, 0.0).sum(-1)
    union = np.where(m_l | exact, lengths, 0.0).sum(-1)
    per_dim = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return np.clip(per_dim, 0.0, 1.0).mean(-1)


def intersection_overlap_experiment(params, n_pairs, rng) -> float:
    """Mean Jaccard between the learned intersection and the exact arc intersection."""
    c = random_cones(rng, n_pairs, params.dim)
    d = random_cones(rng, n_pairs, params.dim)
    learned = ops.to_cone_batch(ops.intersect([ops.from_cone_batch(c), ops.from_cone_batch(d)], params))
    return float(np.mean(_exact_intersection_jaccard(learned, c, d)))


def demorgan_discrepancy_experiment(params, n_pairs, rng) -> float:
    """Mean Jaccard between ``not(not a and not b)`` and the exact union of ``a`` and ``b``."""
    a = random_cones(rng, n_pairs, params.dim)
    b = random_cones(rng, n_pairs, params.dim)
    m = ops.to_cone_batch(ops.union_demorgan([ops.from_cone_batch(a), ops.from_cone_batch(b)], params))
    return float(np.mean(geo.cone_vs_union_jaccard(m, [a, b])))


@dataclass
class EmptyIntersectionReport:
    mean_aperture_nonempty: float
    mean_aperture_empty: float
    roc_auc: float
    n_nonempty: int
    n_empty: int


def _rows(aps):
    aps = np.asarray(aps, dtype=np.float64)
    return aps.reshape(len(aps), -1) if aps.size else np.zeros((0, 1))


def empty_intersection_from_apertures(nonempty_aps, empty_aps) -> EmptyIntersectionReport:
    """Mean aperture per class and the AUC of separating them by L1 norm; a
    class with no samples gives a partial report with NaN in its fields."""
    ne, em = _rows(nonempty_aps), _rows(empty_aps)
    auc = roc_auc(ne.sum(-1), em.sum(-1)) if len(ne) and len(em) else float("nan")
    return EmptyIntersectionReport(float(ne.mean()) if ne.size else float("nan"),
                                   float(em.mean()) if em.size else float("nan"),
                                   auc, len(ne), len(em))


def sample_2i_by_size(tier, n_queries, rng, min_answers=6, max_tries=None):
    """Two lists of 2i queries: more than five answers, and empty answers."""
    from .oracle import traverse_answers

    store = tier.store
    edges = sorted(store.triples)
    tmpl = template("2i")
    big, empty = [], []
    tries = max_tries or 50 * n_queries
    for _ in range(tries):
        if len(big) >= n_queries and len(empty) >= n_queries:
            break
        e0 = edges[rng.integers(len(edges))]
        e1 = edges[rng.integers(len(edges))]
        g = tmpl.instantiate([e0[0], e1[0]], [e0[1], e1[1]])
        n = len(traverse_answers(g, tier))
        if n >= min_answers and len(big) < n_queries:
            big.append(g)
        elif n == 0 and len(empty) < n_queries:
            empty.append(g)
    return big, empty


def empty_intersection_experiment(tier, params, n_queries, rng, scale=ScaleConfig()) -> EmptyIntersectionReport:
    big, empty = sample_2i_by_size(tier, n_queries, rng)

    def apertures(graphs):
        if not graphs:
            return np.zeros((0, params.dim))
        return embed_many(graphs, params, EmbedConfig(scale))[1][:, 0]

    return empty_intersection_from_apertures(apertures(big), apertures(empty))


@dataclass
class PrecisionRecall:
    precision: float
    recall: float
    no_predictions: bool


def membership_precision_recall(queries, params, fraction=0.625, scale=ScaleConfig()) -> PrecisionRecall:
    """Micro precision/recall of majority-of-dimensions membership over all entities."""
    queries = list(queries)
    graphs = [to_dnf(q.graph) for q in queries]
    axes, aps, mask = embed_many(graphs, params, EmbedConfig(scale))
    ent = params.entity_axes.data
    d = ent.shape[1]
    need = math.ceil(fraction * d - 1e-9)
    tp = fp = fn = 0
    for i, q in enumerate(queries):
        best = np.zeros(ent.shape[0], dtype=np.int64)
        for j in np.flatnonzero(mask[i]):
            count = geo.inside_mask(ent, axes[i, j], aps[i, j]).sum(-1)
            best = np.maximum(best, count)
        pred = best >= need
        truth = np.zeros(ent.shape[0], dtype=bool)
        truth[list(q.answers)] = True
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
    no_pred = tp + fp == 0
    precision = 0.0 if no_pred else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    return PrecisionRecall(precision, recall, no_pred)


def semantic_average_equal(axes) -> np.ndarray:
    """Equal-weight semantic average of the rows of ``axes`` (shape ``(n, d)``)."""
    axes = np.asarray(axes, dtype=np.float64)
    w = np.full(axes.shape, 1.0 / axes.shape[0])
    x = (w * np.cos(axes)).sum(0)
    y = (w * np.sin(axes)).sum(0)
    return geo.arg(geo.PlanarCoordinates(x, y))
