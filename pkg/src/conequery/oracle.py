"""Exact query answering and ground-query sampling.

``traverse_answers`` evaluates a query graph bottom-up with set operations over
the adjacency index.  ``brute_force_answers`` instead checks the logical
formula directly, quantifying every existential variable over the whole
entity domain against dense relation matrices built from the raw triples; the
two share no code and are cross-checked in the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, GuardError, SamplingFailure
from .query import (Anchor, Intersection, Negation, Node, Projection, StructureTemplate, Union,
                    canonical_structures, identify_structure, parse, unparse)
from .store import GraphTier, Tiers, TripleStore

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
MAX_TRIES = 128


def _store(tier) -> TripleStore:
    return tier.store if isinstance(tier, GraphTier) else tier


def traverse_answers(node: Node, tier) -> frozenset:
    store = _store(tier)

    def ev(n):
        if isinstance(n, Anchor):
            return {n.entity}
        if isinstance(n, Projection):
            out = set()
            for v in ev(n.child):
                out.update(store.neighbors(v, n.relation))
            return out
        if isinstance(n, Intersection):
            sets = [ev(c) for c in n.children]
            return set.intersection(*sets)
        if isinstance(n, Union):
            return set().union(*[ev(c) for c in n.children])
        return set(range(store.n_entities)) - ev(n.child)

    return frozenset(ev(node))


def _bound_variables(node: Node) -> int:
    """Existential variables below ``node`` other than its own output."""
    if isinstance(node, Anchor):
        return 0
    if isinstance(node, Projection):
        inner = 0 if isinstance(node.child, Anchor) else 1
        return inner + _bound_variables(node.child)
    if isinstance(node, Negation):
        return _bound_variables(node.child)
    return sum(_bound_variables(c) for c in node.children)


def brute_force_answers(node: Node, tier, max_entities=200, max_bound=3) -> frozenset:
    """Answer by direct model checking of the first-order formula.

    ``y`` satisfies ``p_r(child)`` iff some ``x`` in the domain satisfies the
    child formula and ``r(x, y)`` is a stored triple; every such ``x`` is
    enumerated.  Refuses graphs beyond ``max_entities`` entities or queries
    with more than ``max_bound`` bound variables.
    """
    store = _store(tier)
    n = store.n_entities
    if n > max_entities:
        raise GuardError(f"brute force refused: {n} entities > {max_entities}")
    if _bound_variables(node) > max_bound:
        raise GuardError(f"brute force refused: more than {max_bound} bound variables")
    rel = np.zeros((store.n_relations, n, n), dtype=bool)
    for s, r, o in store.triples:
        rel[r, s, o] = True

    def sat(f):
        if isinstance(f, Anchor):
            out = np.zeros(n, dtype=bool)
            out[f.entity] = True
            return out
        if isinstance(f, Projection):
            child = sat(f.child)
            # exists x: child(x) and r(x, y), for every (x, y) pair
            return (child[:, None] & rel[f.relation]).any(axis=0)
        if isinstance(f, Intersection):
            out = np.ones(n, dtype=bool)
            for c in f.children:
                out &= sat(c)
            return out
        if isinstance(f, Union):
            out = np.zeros(n, dtype=bool)
            for c in f.children:
                out |= sat(c)
            return out
        return ~sat(f.child)

    return frozenset(int(i) for i in np.flatnonzero(sat(node)))


@dataclass(frozen=True)
class GroundQuery:
    graph: Node
    structure: str
    answers_train: frozenset
    answers_valid: frozenset
    answers_test: frozenset

    def answers(self, tier: str) -> frozenset:
        return getattr(self, f"answers_{tier}")

    def split_answers(self, split: str):
        """``(easy, hard)`` answers for a split; hard ones need the split's new edges."""
        if split == "train":
            return frozenset(), self.answers_train
        lower = self.answers_train if split == "valid" else self.answers_valid
        full = self.answers(split)
        return full & lower, full - lower


def ground(graph: Node, tiers: Tiers, structure=None) -> GroundQuery:
    return GroundQuery(graph, structure or identify_structure(graph),
                       traverse_answers(graph, tiers.train),
                       traverse_answers(graph, tiers.valid),
                       traverse_answers(graph, tiers.test))


def _walk_back(tmpl: StructureTemplate, store: TripleStore, rng):
    anchors = [None] * tmpl.n_anchors
    relations = [None] * tmpl.n_relations
    targets = [e for e in range(store.n_entities) if e in store.incoming]
    if not targets:
        return None

    def walk(node, target):
        if isinstance(node, Anchor):
            anchors[node.entity] = target
            return True
        if isinstance(node, Projection):
            edges = store.incoming.get(target)
            if not edges:
                return False
            s, r = edges[rng.integers(len(edges))]
            relations[node.relation] = r
            return walk(node.child, s)
        if isinstance(node, Negation):
            # the negated branch starts elsewhere; the final check rejects it
            # if it happens to cover the answer
            return walk(node.child, targets[rng.integers(len(targets))])
        return all(walk(c, target) for c in node.children)

    if not walk(tmpl.skeleton, targets[rng.integers(len(targets))]):
        return None
    return tmpl.instantiate(anchors, relations)


def non_trivial(q: GroundQuery, split: str) -> bool:
    return bool(q.split_answers(split)[1])


def sample_query(tmpl: StructureTemplate, tiers: Tiers, split: str, rng, max_tries=MAX_TRIES) -> GroundQuery:
    """Sample one query whose hard answer set for ``split`` is non-empty.

    Anchors and relations are found by walking the split's graph backwards
    from a random answer.  Raises :class:`SamplingFailure` after
    ``max_tries`` rejected candidates.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    store = tiers[split].store
    for _ in range(max_tries):
        graph = _walk_back(tmpl, store, rng)
        if graph is None:
            continue
        q = ground(graph, tiers, tmpl.name)
        if non_trivial(q, split) and len(q.answers(split)) < store.n_entities:
            return q
    raise SamplingFailure(f"no non-trivial {tmpl.name} query for split {split} after {max_tries} tries")


def default_counts(n_train=1000, n_eval=100, negation_share=0.1) -> dict:
    """Per-split, per-structure query counts.

    Training uses the ten training structures with each negation structure
    at ``negation_share`` of the positive count; evaluation splits use all
    fourteen.
    """
    counts = {"train": {}, "valid": {}, "test": {}}
    for t in canonical_structures():
        if t.training:
            counts["train"][t.name] = max(1, round(n_train * negation_share)) if t.negation else n_train
        counts["valid"][t.name] = n_eval
        counts["test"][t.name] = n_eval
    return counts


def _fmt_ids(ids):
    return ",".join(str(i) for i in sorted(ids))


def generate_dataset(counts: dict, tiers: Tiers, seed: int, out_dir) -> dict:
    """Write ``queries-<split>.txt`` and line-aligned ``answers-<split>.txt``.

    Each (split, structure) pair draws from its own generator seeded by
    ``(seed, split index, structure index)``, so output is reproducible and
    independent of the order of ``counts``.  Returns a summary including the
    number of queries that could not be sampled.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    templates = canonical_structures()
    index = {t.name: i for i, t in enumerate(templates)}
    summary = {"seed": seed, "counts": {}, "shortfall": {}}
    for si, split in enumerate(SPLITS):
        wanted = counts.get(split, {})
        lines_q, lines_a = [], []
        for tmpl in templates:
            n = int(wanted.get(tmpl.name, 0))
            if n <= 0:
                continue
            rng = np.random.default_rng([seed, si, index[tmpl.name]])
            seen = set()
            got = 0
            misses = 0
            while got < n and misses < MAX_TRIES:
                try:
                    q = sample_query(tmpl, tiers, split, rng)
                except SamplingFailure:
                    break
                text = unparse(q.graph)
                if text in seen:
                    misses += 1
                    continue
                seen.add(text)
                easy, hard = q.split_answers(split)
                lines_q.append(text)
                lines_a.append(f"easy: {_fmt_ids(easy)} hard: {_fmt_ids(hard)}")
                got += 1
            summary["counts"].setdefault(split, {})[tmpl.name] = got
            if got < n:
                summary["shortfall"].setdefault(split, {})[tmpl.name] = n - got
                log.warning("split %s structure %s: sampled %d of %d", split, tmpl.name, got, n)
        (out / f"queries-{split}.txt").write_text("".join(l + "\n" for l in lines_q), encoding="utf-8")
        (out / f"answers-{split}.txt").write_text("".join(l + "\n" for l in lines_a), encoding="utf-8")
    meta = {"format_version": 1, "seed": seed, "n_entities": tiers.n_entities,
            "n_relations": tiers.n_relations, "counts": summary["counts"],
            "shortfall": summary["shortfall"]}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


@dataclass(frozen=True)
class DatasetQuery:
    graph: Node
    structure: str
    easy: frozenset
    hard: frozenset

    @property
    def answers(self) -> frozenset:
        return self.easy | self.hard


def _parse_ids(text):
    text = text.strip()
    return frozenset(int(t) for t in text.split(",")) if text else frozenset()


def parse_answer_line(line: str):
    line = line.strip()
    if not line.startswith("easy:") or " hard:" not in line:
        raise DataFormatError(f"malformed answer line: {line[:60]!r}")
    easy, hard = line[len("easy:"):].split("hard:", 1)
    return _parse_ids(easy), _parse_ids(hard)


def load_split(data_dir, split: str) -> list:
    d = Path(data_dir)
    qpath, apath = d / f"queries-{split}.txt", d / f"answers-{split}.txt"
    if not qpath.exists():
        raise DataFormatError(f"missing {qpath}")
    queries = [l for l in qpath.read_text(encoding="utf-8").splitlines() if l.split("#", 1)[0].strip()]
    answers = [l for l in apath.read_text(encoding="utf-8").splitlines() if l.strip()]
    if len(queries) != len(answers):
        raise DataFormatError(f"{qpath} and {apath} are not line-aligned")
    out = []
    for text, ans in zip(queries, answers):
        graph = parse(text.split("#", 1)[0].strip())
        easy, hard = parse_answer_line(ans)
        out.append(DatasetQuery(graph, identify_structure(graph) or "custom", easy, hard))
    return out


def load_meta(data_dir) -> dict:
    path = Path(data_dir) / "meta.json"
    if not path.exists():
        raise DataFormatError(f"missing {path}")
    return json.loads(path.read_text(encoding="utf-8"))
