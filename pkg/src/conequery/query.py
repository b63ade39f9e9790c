"""Query graphs, their s-expression syntax, DNF rewriting and embedding.

Grammar (integer ids, whitespace separated)::

    query := (e <entity>) | (p <relation> query) | (i query query+)
           | (u query query+) | (n query)

Fixture files hold one query per line; ``#`` starts a comment.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Union as TUnion

import numpy as np

from . import ops
from .errors import LookupFailure, QuerySyntaxError, UsageError
from .geometry import ConeBatch, DnfEmbedding


@dataclass(frozen=True)
class Anchor:
    entity: int


@dataclass(frozen=True)
class Projection:
    relation: int
    child: "Node"


@dataclass(frozen=True)
class Intersection:
    children: tuple


@dataclass(frozen=True)
class Union:
    children: tuple


@dataclass(frozen=True)
class Negation:
    child: "Node"


Node = TUnion[Anchor, Projection, Intersection, Union, Negation]

# A query graph is represented by its target (root) node; shared sub-trees are
# structurally equal values, so the DAG is kept implicitly.
QueryGraph = Node

_FORMS = {"e": 1, "p": 2, "i": None, "u": None, "n": 1}
_UNIVERSAL = {"a", "all", "forall", "∀"}
_TOKEN = re.compile(rb"\s*(?:(\()|(\))|([^\s()]+))")


def _tokenize(data: bytes):
    pos = 0
    tokens = []
    while pos < len(data):
        m = _TOKEN.match(data, pos)
        if m is None or m.end() == pos:
            if data[pos:].strip() == b"":
                break
            raise QuerySyntaxError("unexpected character", pos)
        start = m.start(m.lastindex)
        tokens.append((m.group(m.lastindex).decode("utf-8"), start))
        pos = m.end()
    return tokens


def parse(text: str, store=None, slots: bool = False) -> Node:
    """Parse one s-expression into a query graph.

    With ``store`` bound, entity and relation ids are checked against it.
    ``slots=True`` is used for structure templates: ``a<k>`` / ``r<k>``
    tokens become slot numbers.
    """
    data = text.encode("utf-8")
    tokens = _tokenize(data)
    if not tokens:
        raise QuerySyntaxError("empty query", 0)
    pos = 0

    def ident(tok, offset, kind):
        if slots:
            prefix = "a" if kind == "entity" else "r"
            if not (tok.startswith(prefix) and tok[1:].isdigit()):
                raise QuerySyntaxError(f"expected {kind} slot, got {tok!r}", offset)
            return int(tok[1:])
        if not tok.isdigit():
            raise QuerySyntaxError(f"expected integer {kind} id, got {tok!r}", offset)
        value = int(tok)
        if store is not None:
            limit = store.n_entities if kind == "entity" else store.n_relations
            if value >= limit:
                raise LookupFailure(f"unknown {kind} id {value} at byte {offset}")
        return value

    def expr():
        nonlocal pos
        if pos >= len(tokens):
            raise QuerySyntaxError("unexpected end of input", len(data))
        tok, offset = tokens[pos]
        if tok != "(":
            raise QuerySyntaxError(f"expected '(', got {tok!r}", offset)
        pos += 1
        if pos >= len(tokens):
            raise QuerySyntaxError("unexpected end of input", len(data))
        head, head_off = tokens[pos]
        if head in _UNIVERSAL:
            raise QuerySyntaxError("universal quantification is not supported", head_off)
        if head not in _FORMS:
            raise QuerySyntaxError(f"unknown form {head!r}", head_off)
        pos += 1
        if head == "e":
            node = Anchor(ident(*_take(), "entity"))
        elif head == "p":
            rel = ident(*_take(), "relation")
            node = Projection(rel, expr())
        elif head == "n":
            node = Negation(expr())
        else:
            children = []
            while pos < len(tokens) and tokens[pos][0] == "(":
                children.append(expr())
            if len(children) < 2:
                raise QuerySyntaxError(f"'{head}' needs at least two operands", head_off)
            node = (Intersection if head == "i" else Union)(tuple(children))
        if pos >= len(tokens):
            raise QuerySyntaxError("missing ')'", len(data))
        tok, offset = tokens[pos]
        if tok != ")":
            raise QuerySyntaxError(f"expected ')', got {tok!r}", offset)
        pos += 1
        return node

    def _take():
        nonlocal pos
        if pos >= len(tokens):
            raise QuerySyntaxError("unexpected end of input", len(data))
        tok, offset = tokens[pos]
        if tok in "()":
            raise QuerySyntaxError("expected an id", offset)
        pos += 1
        return tok, offset

    node = expr()
    if pos != len(tokens):
        raise QuerySyntaxError("trailing input after query", tokens[pos][1])
    return node


def unparse(node: Node, slots: bool = False) -> str:
    if isinstance(node, Anchor):
        return f"(e a{node.entity})" if slots else f"(e {node.entity})"
    if isinstance(node, Projection):
        rel = f"r{node.relation}" if slots else str(node.relation)
        return f"(p {rel} {unparse(node.child, slots)})"
    if isinstance(node, Negation):
        return f"(n {unparse(node.child, slots)})"
    head = "i" if isinstance(node, Intersection) else "u"
    return "(" + head + " " + " ".join(unparse(c, slots) for c in node.children) + ")"


def structure_key(node: Node) -> str:
    """The query's shape with every id blanked out."""
    if isinstance(node, Anchor):
        return "(e _)"
    if isinstance(node, Projection):
        return f"(p _ {structure_key(node.child)})"
    if isinstance(node, Negation):
        return f"(n {structure_key(node.child)})"
    head = "i" if isinstance(node, Intersection) else "u"
    return "(" + head + " " + " ".join(structure_key(c) for c in node.children) + ")"


def read_queries(path) -> list:
    """Load a fixture file: one query per line, ``#`` comments."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(parse(line))
    return out


def walk(node: Node) -> Iterable[Node]:
    yield node
    if isinstance(node, (Projection, Negation)):
        yield from walk(node.child)
    elif isinstance(node, (Intersection, Union)):
        for c in node.children:
            yield from walk(c)


def anchors(node: Node) -> list:
    return [n.entity for n in walk(node) if isinstance(n, Anchor)]


def relations(node: Node) -> list:
    return [n.relation for n in walk(node) if isinstance(n, Projection)]


# DNF

def _disjuncts(node: Node) -> list:
    if isinstance(node, Anchor):
        return [node]
    if isinstance(node, Projection):
        return [Projection(node.relation, c) for c in _disjuncts(node.child)]
    if isinstance(node, Union):
        return [d for c in node.children for d in _disjuncts(c)]
    if isinstance(node, Intersection):
        return [Intersection(tuple(combo))
                for combo in itertools.product(*[_disjuncts(c) for c in node.children])]
    parts = _disjuncts(node.child)
    if len(parts) == 1:
        return [Negation(parts[0])]
    # not(a or b) == not a and not b
    return [Intersection(tuple(Negation(p) for p in parts))]


def to_dnf(node: Node) -> Node:
    """Lift every union to a single top-level union of union-free queries."""
    parts = _disjuncts(node)
    return parts[0] if len(parts) == 1 else Union(tuple(parts))


def _union_free(node: Node) -> bool:
    return not any(isinstance(n, Union) for n in walk(node))


def is_dnf(node: Node) -> bool:
    if isinstance(node, Union):
        return all(_union_free(c) for c in node.children)
    return _union_free(node)


def conjuncts(node: Node) -> list:
    return list(node.children) if isinstance(node, Union) else [node]


# structure templates

@dataclass(frozen=True)
class StructureTemplate:
    name: str
    skeleton: Node
    training: bool
    negation: bool

    @property
    def n_anchors(self):
        return len(anchors(self.skeleton))

    @property
    def n_relations(self):
        return len(relations(self.skeleton))

    @property
    def disjunctive(self):
        return any(isinstance(n, Union) for n in walk(self.skeleton))

    def instantiate(self, anchor_ids, relation_ids) -> Node:
        def fill(node):
            if isinstance(node, Anchor):
                return Anchor(int(anchor_ids[node.entity]))
            if isinstance(node, Projection):
                return Projection(int(relation_ids[node.relation]), fill(node.child))
            if isinstance(node, Negation):
                return Negation(fill(node.child))
            return type(node)(tuple(fill(c) for c in node.children))

        return fill(self.skeleton)

    def matches(self, node: Node) -> bool:
        return structure_key(node) == structure_key(self.skeleton)


_TEMPLATE_TEXT = [
    ("1p", "(p r0 (e a0))", True),
    ("2p", "(p r1 (p r0 (e a0)))", True),
    ("3p", "(p r2 (p r1 (p r0 (e a0))))", True),
    ("2i", "(i (p r0 (e a0)) (p r1 (e a1)))", True),
    ("3i", "(i (p r0 (e a0)) (p r1 (e a1)) (p r2 (e a2)))", True),
    ("ip", "(p r2 (i (p r0 (e a0)) (p r1 (e a1))))", False),
    ("pi", "(i (p r1 (p r0 (e a0))) (p r2 (e a1)))", False),
    ("2u", "(u (p r0 (e a0)) (p r1 (e a1)))", False),
    ("up", "(p r2 (u (p r0 (e a0)) (p r1 (e a1))))", False),
    ("2in", "(i (p r0 (e a0)) (n (p r1 (e a1))))", True),
    ("3in", "(i (p r0 (e a0)) (p r1 (e a1)) (n (p r2 (e a2))))", True),
    ("inp", "(p r2 (i (p r0 (e a0)) (n (p r1 (e a1)))))", True),
    ("pin", "(i (p r1 (p r0 (e a0))) (n (p r2 (e a1))))", True),
    ("pni", "(i (n (p r1 (p r0 (e a0)))) (p r2 (e a1)))", True),
]

STRUCTURE_NAMES = [name for name, _, _ in _TEMPLATE_TEXT]
NEGATION_STRUCTURES = ("2in", "3in", "inp", "pin", "pni")


def canonical_structures() -> list:
    """The fourteen query structures, training ones flagged."""
    out = []
    for name, text, training in _TEMPLATE_TEXT:
        skeleton = parse(text, slots=True)
        out.append(StructureTemplate(name, skeleton, training, name in NEGATION_STRUCTURES))
    return out


def template(name: str) -> StructureTemplate:
    for t in canonical_structures():
        if t.name == name:
            return t
    raise LookupFailure(f"unknown query structure {name!r}")


def identify_structure(node: Node):
    """Name of the canonical structure with the same shape, or ``None``."""
    key = structure_key(node)
    for t in canonical_structures():
        if structure_key(t.skeleton) == key:
            return t.name
    return None


# embedding

@dataclass(frozen=True)
class EmbedConfig:
    scale: ops.ScaleConfig = ops.ScaleConfig()
    dropout_rate: float = 0.0
    training: bool = False
    union: str = "dnf"

    def __post_init__(self):
        if self.union not in ("dnf", "demorgan"):
            raise UsageError(f"unknown union mode {self.union!r}")


def embed_batch(graphs, params, config: EmbedConfig = EmbedConfig(), rng=None) -> list:
    """Embed same-shaped DNF queries together.

    Returns one :class:`~conequery.ops.Cone` per conjunct, each of shape
    ``(len(graphs), d)``.  With ``config.union == "demorgan"`` queries need
    not be in DNF: every union becomes ``not(and(not ...))`` and a single
    cone is returned.
    """
    demorgan = config.union == "demorgan"
    graphs = list(graphs)
    if not graphs:
        raise UsageError("embed_batch needs at least one query")
    key = structure_key(graphs[0])
    for g in graphs:
        if not demorgan and not is_dnf(g):
            raise UsageError("query is not in DNF; rewrite it with to_dnf() first")
        if structure_key(g) != key:
            raise UsageError("embed_batch needs queries of identical shape")

    def emb(nodes):
        head = nodes[0]
        if isinstance(head, Anchor):
            return ops.entity_cone(params, [n.entity for n in nodes])
        if isinstance(head, Projection):
            child = emb([n.child for n in nodes])
            return ops.project(child, [n.relation for n in nodes], params, config.scale)
        if isinstance(head, Negation):
            return ops.negate(emb([n.child for n in nodes]))
        if isinstance(head, Intersection):
            kids = [emb([n.children[i] for n in nodes]) for i in range(len(head.children))]
            return ops.intersect(kids, params, config.dropout_rate, config.training, rng)
        if demorgan:
            kids = [emb([n.children[i] for n in nodes]) for i in range(len(head.children))]
            return ops.union_demorgan(kids, params, config.dropout_rate, config.training, rng)
        raise UsageError("union below the root; rewrite the query with to_dnf() first")

    if isinstance(graphs[0], Union) and not demorgan:
        branches = [[emb([g.children[i] for g in graphs])] for i in range(len(graphs[0].children))]
        return ops.union_dnf(branches)
    return [emb(graphs)]


def embed_query(graph: Node, params, config: EmbedConfig = EmbedConfig(), rng=None) -> DnfEmbedding:
    """Embed a single DNF query into reference cone types."""
    cones = embed_batch([graph], params, config, rng)
    return DnfEmbedding(tuple(ConeBatch.from_raw(c.axes.data[0], c.apertures.data[0]) for c in cones))


def group_by_structure(graphs) -> dict:
    """Indices of ``graphs`` grouped by shape, in first-appearance order."""
    groups = {}
    for i, g in enumerate(graphs):
        groups.setdefault(structure_key(g), []).append(i)
    return groups


def embed_many(graphs, params, config: EmbedConfig = EmbedConfig(), rng=None):
    """Reference embeddings for many DNF queries of mixed shapes.

    Returns ``(axes, apertures, mask)`` arrays of shape ``(n, m, d)`` where
    ``m`` is the largest conjunct count; ``mask[q, j]`` marks real conjuncts.
    """
    graphs = list(graphs)
    groups = group_by_structure(graphs)
    m = 1 if config.union == "demorgan" else max(len(conjuncts(g)) for g in graphs)
    d = params.dim
    axes = np.zeros((len(graphs), m, d))
    aps = np.zeros((len(graphs), m, d))
    mask = np.zeros((len(graphs), m), dtype=bool)
    for idx in groups.values():
        cones = embed_batch([graphs[i] for i in idx], params, config, rng)
        for j, c in enumerate(cones):
            cb = ops.to_cone_batch(c)
            axes[idx, j] = cb.axes
            aps[idx, j] = cb.apertures
            mask[idx, j] = True
    return axes, aps, mask
