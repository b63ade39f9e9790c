"""Triple storage, id dictionaries and the nested train/valid/test graphs."""

from __future__ import annotations

import json
import logging
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path

from .errors import DataFormatError, LookupFailure

log = logging.getLogger(__name__)

TIERS = ("train", "valid", "test")


class Vocabulary:
    """Bidirectional id <-> name table, ids assigned densely from 0."""

    def __init__(self, names=()):
        self._names = []
        self._ids = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._names.append(name)
            self._ids[name] = idx
        return idx

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise LookupFailure(f"unknown name {name!r}") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self._names):
            raise LookupFailure(f"id {idx} out of range")
        return self._names[idx]

    def __contains__(self, name):
        return name in self._ids

    def __len__(self):
        return len(self._names)

    @property
    def names(self):
        return list(self._names)


class TripleStore:
    """An immutable set of ``(subject, relation, object)`` id triples."""

    def __init__(self, entities: Vocabulary, relations: Vocabulary, triples):
        self.entities = entities
        self.relations = relations
        self.triples = frozenset((int(s), int(r), int(o)) for s, r, o in triples)
        n_e, n_r = len(entities), len(relations)
        for s, r, o in self.triples:
            if not (0 <= s < n_e and 0 <= o < n_e and 0 <= r < n_r):
                raise LookupFailure(f"triple {(s, r, o)} has an out-of-range id")
        adj = {}
        inc = {}
        for s, r, o in self.triples:
            adj.setdefault((s, r), []).append(o)
            inc.setdefault(o, []).append((s, r))
        self.adjacency = {k: tuple(sorted(v)) for k, v in adj.items()}
        self.incoming = {k: tuple(sorted(v)) for k, v in inc.items()}

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_relations(self):
        return len(self.relations)

    def __len__(self):
        return len(self.triples)

    def neighbors(self, v: int, r: int) -> tuple:
        """Sorted objects reachable from ``v`` over relation ``r``."""
        if not 0 <= v < self.n_entities:
            raise LookupFailure(f"unknown entity id {v}")
        if not 0 <= r < self.n_relations:
            raise LookupFailure(f"unknown relation id {r}")
        return self.adjacency.get((v, r), ())

    def has_edge(self, s, r, o) -> bool:
        objs = self.adjacency.get((s, r), ())
        i = bisect_left(objs, o)
        return i < len(objs) and objs[i] == o

    def stats(self) -> dict:
        return {"entities": self.n_entities, "relations": self.n_relations, "triples": len(self)}


@dataclass(frozen=True)
class GraphTier:
    tier: str
    store: TripleStore

    def neighbors(self, v, r):
        return self.store.neighbors(v, r)


@dataclass(frozen=True)
class Tiers:
    train: GraphTier
    valid: GraphTier
    test: GraphTier

    def __iter__(self):
        return iter((self.train, self.valid, self.test))

    def __getitem__(self, name):
        return getattr(self, name)

    @property
    def n_entities(self):
        return self.test.store.n_entities

    @property
    def n_relations(self):
        return self.test.store.n_relations


def build_tiers(entities, relations, train, valid_extra=(), test_extra=()) -> Tiers:
    """Nest edge sets: valid = train + valid edges, test = valid + test edges."""
    train = set(train)
    valid = train | set(valid_extra)
    test = valid | set(test_extra)
    return Tiers(GraphTier("train", TripleStore(entities, relations, train)),
                 GraphTier("valid", TripleStore(entities, relations, valid)),
                 GraphTier("test", TripleStore(entities, relations, test)))


def _read_vocab(path: Path) -> Vocabulary | None:
    if not path.exists():
        return None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip().isdigit():
                raise DataFormatError(f"{path}:{lineno}: expected 'id<TAB>name'")
            rows.append((int(parts[0]), parts[1]))
    rows.sort()
    if [i for i, _ in rows] != list(range(len(rows))):
        raise DataFormatError(f"{path}: ids must be dense and start at 0")
    return Vocabulary(name for _, name in rows)


def _resolve(token, vocab: Vocabulary, fixed: bool, path, lineno):
    if token in vocab:
        return vocab.id(token)
    if fixed:
        if token.isdigit() and int(token) < len(vocab):
            return int(token)
        raise DataFormatError(f"{path}:{lineno}: unknown name or id {token!r}")
    return vocab.add(token)


def _read_triples(path: Path, ents, rels, fixed_e, fixed_r):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataFormatError(f"{path}:{lineno}: expected 'subject<TAB>relation<TAB>object'")
            s = _resolve(parts[0], ents, fixed_e, path, lineno)
            r = _resolve(parts[1], rels, fixed_r, path, lineno)
            o = _resolve(parts[2], ents, fixed_e, path, lineno)
            out.append((s, r, o))
    return out


def ingest(train_path, valid_path, test_path, entities_path=None, relations_path=None) -> Tiers:
    """Read three TSV triple files into nested graph tiers.

    Tokens are resolved through ``entities.tsv`` / ``relations.tsv`` when
    those maps exist (by name first, then as a numeric id); otherwise names
    get ids in order of first appearance across train, valid, test.
    """
    paths = [Path(p) for p in (train_path, valid_path, test_path)]
    for p in paths:
        if not p.exists():
            raise DataFormatError(f"missing triple file {p}")
    ents = _read_vocab(Path(entities_path)) if entities_path else None
    rels = _read_vocab(Path(relations_path)) if relations_path else None
    fixed_e, fixed_r = ents is not None, rels is not None
    ents = ents or Vocabulary()
    rels = rels or Vocabulary()
    train, valid, test = (_read_triples(p, ents, rels, fixed_e, fixed_r) for p in paths)
    tiers = build_tiers(ents, rels, train, valid, test)
    log.info("ingested %d entities, %d relations; triples train=%d valid=%d test=%d",
             len(ents), len(rels), len(tiers.train.store), len(tiers.valid.store), len(tiers.test.store))
    return tiers


def ingest_dir(data_dir) -> Tiers:
    d = Path(data_dir)
    return ingest(d / "train.tsv", d / "valid.tsv", d / "test.tsv",
                  d / "entities.tsv", d / "relations.tsv")


def save_index(tiers: Tiers, path):
    """Write the ingested graphs as a JSON index (sorted triple lists per tier)."""
    store = tiers.test.store
    train = tiers.train.store.triples
    valid = tiers.valid.store.triples
    doc = {
        "format_version": 1,
        "entities": store.entities.names,
        "relations": store.relations.names,
        "train": sorted(train),
        "valid": sorted(valid - train),
        "test": sorted(store.triples - valid),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_index(path) -> Tiers:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise DataFormatError(f"{path}: unsupported index format")
    ents, rels = Vocabulary(doc["entities"]), Vocabulary(doc["relations"])
    return build_tiers(ents, rels, map(tuple, doc["train"]), map(tuple, doc["valid"]),
                       map(tuple, doc["test"]))


def load_tiers(path) -> Tiers:
    """Load from a directory of TSV files or from a JSON index file."""
    p = Path(path)
    if p.is_dir():
        if (p / "index.json").exists() and not (p / "train.tsv").exists():
            return load_index(p / "index.json")
        return ingest_dir(p)
    return load_index(p)
