"""Small synthetic knowledge graphs with a planted relational structure."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .store import Tiers, Vocabulary, build_tiers


def random_kg(n_entities, n_relations, n_triples, rng, valid_frac=0.1, test_frac=0.1) -> Tiers:
    """Uniformly random triples split into nested tiers."""
    triples = set()
    while len(triples) < n_triples:
        triples.add((int(rng.integers(n_entities)), int(rng.integers(n_relations)),
                     int(rng.integers(n_entities))))
    order = sorted(triples)
    rng.shuffle(order)
    n_valid = int(round(valid_frac * len(order)))
    n_test = int(round(test_frac * len(order)))
    test = order[:n_test]
    valid = order[n_test:n_test + n_valid]
    train = order[n_test + n_valid:]
    return build_tiers(_vocab("e", n_entities), _vocab("r", n_relations), train, valid, test)


def clustered_kg(n_entities=64, n_relations=4, n_clusters=8, rng=None,
                 valid_frac=0.1, test_frac=0.1) -> Tiers:
    """Entities fall into equal clusters; relation ``r`` links every member of
    cluster ``c`` to every member of cluster ``perm_r[c]``.

    A held-out edge is thus predictable from the entity's cluster.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if n_entities % n_clusters:
        raise ValueError("n_entities must be a multiple of n_clusters")
    size = n_entities // n_clusters
    labels = rng.permutation(np.repeat(np.arange(n_clusters), size))
    members = [np.flatnonzero(labels == c) for c in range(n_clusters)]
    triples = []
    for r in range(n_relations):
        perm = rng.permutation(n_clusters)
        for s in range(n_entities):
            for o in members[perm[labels[s]]]:
                triples.append((s, r, int(o)))
    rng.shuffle(triples)
    n_valid = int(round(valid_frac * len(triples)))
    n_test = int(round(test_frac * len(triples)))
    test = triples[:n_test]
    valid = triples[n_test:n_test + n_valid]
    train = triples[n_test + n_valid:]
    return build_tiers(_vocab("e", n_entities), _vocab("r", n_relations), train, valid, test)


def _vocab(prefix, n):
    return Vocabulary(f"{prefix}{i}" for i in range(n))


def write_tsv(tiers: Tiers, out_dir):
    """Write ``train/valid/test.tsv`` (new edges per tier) plus id maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = tiers.test.store
    ents, rels = store.entities, store.relations
    train = tiers.train.store.triples
    valid = tiers.valid.store.triples - train
    test = store.triples - tiers.valid.store.triples
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for s, r, o in sorted(rows):
                fh.write(f"{ents.name(s)}\t{rels.name(r)}\t{ents.name(o)}\n")
    for name, vocab in (("entities", ents), ("relations", rels)):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for i, n in enumerate(vocab.names):
                fh.write(f"{i}\t{n}\n")
