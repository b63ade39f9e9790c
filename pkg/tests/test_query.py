import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conequery import autodiff as ad
from conequery import ops
from conequery.errors import LookupFailure, QuerySyntaxError, UsageError
from conequery.geometry import DnfEmbedding
from conequery.query import (Anchor, EmbedConfig, Intersection, Negation, Projection, Union,
                             canonical_structures, embed_batch, embed_many, embed_query,
                             identify_structure, is_dnf, parse, read_queries, structure_key,
                             template, to_dnf, unparse)


def graphs(max_leaves=8):
    leaf = st.builds(Anchor, st.integers(0, 20))

    def extend(children):
        return st.one_of(
            st.builds(Projection, st.integers(0, 5), children),
            st.builds(Negation, children),
            st.builds(lambda xs: Intersection(tuple(xs)), st.lists(children, min_size=2, max_size=3)),
            st.builds(lambda xs: Union(tuple(xs)), st.lists(children, min_size=2, max_size=3)),
        )

    return st.recursive(leaf, extend, max_leaves=max_leaves)


def test_parse_examples():
    assert parse("(p 3 (e 12))") == Projection(3, Anchor(12))
    g = parse("(i (p 1 (e 7)) (n (p 2 (e 9))))")
    assert identify_structure(g) == "2in"
    assert identify_structure(parse("(p 3 (e 12))")) == "1p"


@pytest.mark.parametrize("text, offset", [
    ("(i (e 1))", 1),
    ("(u (e 1))", 1),
    ("", 0),
    ("(e 1", 4),
    ("(p x (e 1))", 3),
    ("(q 1)", 1),
    ("(e 1) (e 2)", 6),
    ("(e 1))", 5),
])
def test_parse_errors_carry_offsets(text, offset):
    with pytest.raises(QuerySyntaxError) as err:
        parse(text)
    assert err.value.offset == offset


@pytest.mark.parametrize("form", ["a", "all", "forall", "∀"])
def test_universal_quantifier_rejected(form):
    with pytest.raises(QuerySyntaxError):
        parse(f"({form} (p 1 (e 2)))")


def test_parse_checks_ids_against_store(small_kg):
    store = small_kg.test.store
    parse("(p 4 (e 49))", store)
    with pytest.raises(LookupFailure):
        parse("(p 5 (e 1))", store)
    with pytest.raises(LookupFailure):
        parse("(p 0 (e 50))", store)


@given(graphs())
def test_round_trip(g):
    text = unparse(g)
    assert parse(text) == g
    assert unparse(parse(text)) == text
    assert parse("  " + text.replace(" ", "\n ") + "\t") == g


def test_read_queries(tmp_path):
    f = tmp_path / "q.txt"
    f.write_text("# header\n(p 1 (e 2))  # trailing\n\n(n (e 3))\n", encoding="utf-8")
    assert read_queries(f) == [parse("(p 1 (e 2))"), parse("(n (e 3))")]


def test_to_dnf_rules():
    a, b, c = parse("(e 1)"), parse("(e 2)"), parse("(e 3)")
    assert to_dnf(parse("(p 5 (u (e 1) (e 2)))")) == Union((Projection(5, a), Projection(5, b)))
    assert to_dnf(Intersection((Union((a, b)), c))) == Union((Intersection((a, c)), Intersection((b, c))))
    assert to_dnf(Negation(Union((a, b)))) == Intersection((Negation(a), Negation(b)))
    g = parse("(i (p 1 (e 1)) (n (p 2 (e 2))))")
    assert to_dnf(g) == g


@given(graphs())
def test_to_dnf_idempotent_and_dnf(g):
    d = to_dnf(g)
    assert is_dnf(d)
    assert to_dnf(d) == d


def test_templates():
    ts = canonical_structures()
    assert len(ts) == 14
    assert {t.name for t in ts if not t.training} == {"ip", "pi", "2u", "up"}
    assert {t.name for t in ts if t.negation} == {"2in", "3in", "inp", "pin", "pni"}
    pin, pni = template("pin"), template("pni")
    assert unparse(pin.skeleton, slots=True) == "(i (p r1 (p r0 (e a0))) (n (p r2 (e a1))))"
    assert unparse(pni.skeleton, slots=True) == "(i (n (p r1 (p r0 (e a0)))) (p r2 (e a1)))"
    # same parts, negation on the other branch
    strip = lambda n: n.child if isinstance(n, Negation) else n
    assert sorted(map(unparse, map(strip, pin.skeleton.children))) == \
        sorted(map(unparse, map(strip, pni.skeleton.children)))
    with pytest.raises(LookupFailure):
        template("4p")


def test_instantiate_and_identify():
    for t in canonical_structures():
        g = t.instantiate(list(range(10, 10 + t.n_anchors)), list(range(t.n_relations)))
        assert identify_structure(g) == t.name
        assert t.matches(g)
    assert identify_structure(parse("(n (e 1))")) is None


def test_embed_query_shapes(small_params):
    e1 = embed_query(parse("(p 0 (e 1))"), small_params)
    assert isinstance(e1, DnfEmbedding) and len(e1) == 1 and e1.d == 4
    e2 = embed_query(to_dnf(parse("(u (p 0 (e 1)) (p 1 (e 2)))")), small_params)
    assert len(e2) == 2
    again = embed_query(parse("(p 0 (e 1))"), small_params)
    assert e1.conjuncts[0] == again.conjuncts[0]


def test_embed_rejects_non_dnf(small_params):
    with pytest.raises(UsageError):
        embed_query(parse("(p 2 (u (p 0 (e 1)) (p 1 (e 2))))"), small_params)
    with pytest.raises(UsageError):
        embed_batch([parse("(p 0 (e 1))"), parse("(n (e 1))")], small_params)


def test_embed_batch_equals_single(small_params):
    gs = [parse(f"(i (p 0 (e {a})) (n (p 1 (e {b}))))") for a, b in [(1, 2), (3, 4), (5, 6)]]
    batch = embed_batch(gs, small_params)[0]
    for i, g in enumerate(gs):
        one = embed_batch([g], small_params)[0]
        assert np.allclose(one.axes.data[0], batch.axes.data[i], rtol=0, atol=1e-12)
        assert np.allclose(one.apertures.data[0], batch.apertures.data[i], rtol=0, atol=1e-12)


def test_embed_many_masks_padding(small_params):
    gs = [to_dnf(parse("(u (p 0 (e 1)) (p 1 (e 2)))")), parse("(p 0 (e 3))")]
    axes, aps, mask = embed_many(gs, small_params)
    assert axes.shape == (2, 2, 4)
    assert mask.tolist() == [[True, True], [True, False]]


def test_demorgan_mode_single_cone(small_params):
    g = parse("(p 2 (u (p 0 (e 1)) (p 1 (e 2))))")
    out = embed_batch([g], small_params, EmbedConfig(union="demorgan"))
    assert len(out) == 1
    with pytest.raises(UsageError):
        EmbedConfig(union="other")


@pytest.mark.parametrize("name", [t.name for t in canonical_structures()])
def test_every_reachable_parameter_gets_a_gradient(name):
    params = ops.ModelParams.init(12, 3, 4, 8, np.random.default_rng(5))
    t = template(name)
    g = to_dnf(t.instantiate(list(range(t.n_anchors)), [i % 3 for i in range(t.n_relations)]))
    with ad.Tape() as tape:
        cones = embed_batch([g], params)
        dist = ops.dnf_distance(params.entity_axes.data[[7]], cones)
        loss = ad.sum_(dist)
    grads = tape.backward(loss)
    named = params.named_parameters()
    expect = {"entity_axes", "relation_embeddings"} | {k for k in named if k.startswith("projection_mlp")}
    if "(i " in structure_key(g):
        expect |= {k for k in named if k.startswith(("attention_mlp", "gate_"))}
        # the last attention bias shifts every conjunct's logit equally and softmax ignores it
        expect.discard("attention_mlp.b2")
        assert np.allclose(grads[named["attention_mlp.b2"]], 0, atol=1e-12)
    for key in expect:
        assert named[key] in grads, f"{name}: no gradient for {key}"
        assert np.all(np.isfinite(grads[named[key]]))
        assert np.any(grads[named[key]] != 0), f"{name}: zero gradient for {key}"
