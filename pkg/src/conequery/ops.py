"""Trainable cone operators: projection, intersection, complement, union.

Operators take and return :class:`Cone` pairs of autodiff tensors shaped
``(batch, d)``.  Outside a :class:`~conequery.autodiff.Tape` they run as
plain forward computations; :func:`to_cone_batch` converts a result into the
reference :class:`~conequery.geometry.ConeBatch` type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ConfigError, InvalidEmbeddingError, LookupFailure, ShapeError

PI = math.pi


class Cone(NamedTuple):
    axes: Tensor
    apertures: Tensor


@dataclass(frozen=True)
class ScaleConfig:
    lambda1: float = 1.0
    lambda2: float = 2.0

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ConfigError("scale parameters must be positive")


class MLP:
    """Dense layers with relu between them (and optionally after the last)."""

    def __init__(self, weights, biases, final_relu=False):
        self.weights = list(weights)
        self.biases = list(biases)
        self.final_relu = final_relu

    @classmethod
    def init(cls, sizes, rng, final_relu=False, name="mlp"):
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                  requires_grad=True, name=f"{name}.w{i}"))
            biases.append(Tensor(rng.uniform(-bound, bound, (fan_out,)),
                                 requires_grad=True, name=f"{name}.b{i}"))
        return cls(weights, biases, final_relu)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def __call__(self, x):
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, w), b)
            if i < last or self.final_relu:
                x = ad.relu(x)
        return x


class ModelParams:
    """Entity axes, relation translations and the three perceptron blocks.

    One projection network is shared by all relations; one attention network
    and one gate network are shared by all intersections.
    """

    def __init__(self, entity_axes, relation_embeddings, projection_mlp,
                 attention_mlp, gate_inner, gate_outer):
        self.entity_axes = entity_axes
        self.relation_embeddings = relation_embeddings
        self.projection_mlp = projection_mlp
        self.attention_mlp = attention_mlp
        self.gate_inner = gate_inner
        self.gate_outer = gate_outer
        n, d = entity_axes.shape
        if relation_embeddings.shape[1] != 2 * d:
            raise ShapeError("relation table must have 2d columns")

    @classmethod
    def init(cls, n_entities, n_relations, dim, hidden=1600, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        entity = Tensor(rng.uniform(-PI, PI, (n_entities, dim)), requires_grad=True, name="entity_axes")
        relation = Tensor(rng.uniform(-0.5, 0.5, (n_relations, 2 * dim)),
                          requires_grad=True, name="relation_embeddings")
        proj = MLP.init([2 * dim, hidden, hidden, 2 * dim], rng, name="projection")
        att = MLP.init([2 * dim, hidden, hidden, dim], rng, name="attention")
        inner = MLP.init([2 * dim, hidden, hidden], rng, final_relu=True, name="gate_inner")
        outer = MLP.init([hidden, dim], rng, name="gate_outer")
        return cls(entity, relation, proj, att, inner, outer)

    @property
    def dim(self):
        return self.entity_axes.shape[1]

    @property
    def n_entities(self):
        return self.entity_axes.shape[0]

    @property
    def n_relations(self):
        return self.relation_embeddings.shape[0]

    def named_parameters(self):
        """Parameters in a fixed order; names are stable across runs."""
        out = {"entity_axes": self.entity_axes, "relation_embeddings": self.relation_embeddings}
        for block in ("projection_mlp", "attention_mlp", "gate_inner", "gate_outer"):
            mlp = getattr(self, block)
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{block}.w{i}"] = w
                out[f"{block}.b{i}"] = b
        return out

    def state_arrays(self):
        return {k: v.data for k, v in self.named_parameters().items()}

    @classmethod
    def from_arrays(cls, arrays):
        def block(prefix, final_relu=False):
            n = sum(1 for k in arrays if k.startswith(prefix + ".w"))
            ws = [Tensor(np.array(arrays[f"{prefix}.w{i}"]), requires_grad=True) for i in range(n)]
            bs = [Tensor(np.array(arrays[f"{prefix}.b{i}"]), requires_grad=True) for i in range(n)]
            return MLP(ws, bs, final_relu)

        return cls(Tensor(np.array(arrays["entity_axes"]), requires_grad=True),
                   Tensor(np.array(arrays["relation_embeddings"]), requires_grad=True),
                   block("projection_mlp"), block("attention_mlp"),
                   block("gate_inner", final_relu=True), block("gate_outer"))


def entity_cone(params: ModelParams, ids) -> Cone:
    """Anchor entities as zero-aperture cones."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= params.n_entities):
        raise LookupFailure(f"entity id out of range [0, {params.n_entities})")
    axes = ad.take_rows(params.entity_axes, ids)
    return Cone(axes, Tensor(np.zeros(axes.shape)))


def scale_g(x, scale: ScaleConfig = ScaleConfig()) -> Cone:
    """Squash a ``2d`` vector into axes in ``(-pi, pi)`` and apertures in ``(0, 2pi)``."""
    x = ad.as_tensor(x)
    d = x.shape[-1] // 2
    axes = ad.multiply(ad.tanh(ad.multiply(x[..., :d], scale.lambda1)), PI)
    aps = ad.add(ad.multiply(ad.tanh(ad.multiply(x[..., d:], scale.lambda2)), PI), PI)
    return Cone(axes, aps)


def project(cone: Cone, relation_ids, params: ModelParams, scale: ScaleConfig = ScaleConfig()) -> Cone:
    ids = np.asarray(relation_ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= params.n_relations):
        raise LookupFailure(f"relation id out of range [0, {params.n_relations})")
    d = params.dim
    rel = ad.take_rows(params.relation_embeddings, ids)
    x = ad.concat([ad.add(cone.axes, rel[..., :d]), ad.add(cone.apertures, rel[..., d:])], axis=-1)
    return scale_g(params.projection_mlp(x), scale)


def _bounds(cone: Cone):
    half = ad.multiply(cone.apertures, 0.5)
    return ad.concat([ad.subtract(cone.axes, half), ad.add(cone.axes, half)], axis=-1)


def _require_inputs(cones):
    if len(cones) == 0:
        raise InvalidEmbeddingError("set operators need at least one input cone")


def attention_weights(cones: Sequence[Cone], params: ModelParams) -> Tensor:
    """Per-dimension softmax weights over the inputs, shape ``(n, batch, d)``."""
    _require_inputs(cones)
    logits = ad.stack([params.attention_mlp(_bounds(c)) for c in cones], axis=0)
    return ad.softmax(logits, axis=0)


def semantic_average(cones: Sequence[Cone], params: ModelParams, weights=None) -> Tensor:
    """Attention-weighted mean of axes taken on the unit circle."""
    if weights is None:
        weights = attention_weights(cones, params)
    axes = ad.stack([c.axes for c in cones], axis=0)
    x = ad.sum_(ad.multiply(weights, ad.cos(axes)), axis=0)
    y = ad.sum_(ad.multiply(weights, ad.sin(axes)), axis=0)
    return ad.arg(x, y, geometry.ARG_X_CLAMP)


def deepsets_gate(cones: Sequence[Cone], params: ModelParams) -> Tensor:
    _require_inputs(cones)
    inner = ad.stack([params.gate_inner(_bounds(c)) for c in cones], axis=0)
    return ad.sigmoid(params.gate_outer(ad.mean(inner, axis=0)))


def card_min(cones: Sequence[Cone], params: ModelParams, dropout_rate=0.0,
             training=False, rng=None) -> Tensor:
    """Elementwise minimum aperture shrunk by the set gate.

    During training, inverted dropout is applied to the minimum before the
    gate multiplies it.
    """
    _require_inputs(cones)
    smallest = ad.min_(ad.stack([c.apertures for c in cones], axis=0), axis=0)
    if training and dropout_rate > 0:
        if rng is None:
            raise ConfigError("training-mode dropout needs an explicit random generator")
        smallest = ad.dropout(smallest, dropout_rate, True, rng)
    return ad.multiply(smallest, deepsets_gate(cones, params))


def intersect(cones: Sequence[Cone], params: ModelParams, dropout_rate=0.0,
              training=False, rng=None) -> Cone:
    _require_inputs(cones)
    axes = semantic_average(cones, params)
    aps = card_min(cones, params, dropout_rate, training, rng)
    return Cone(axes, aps)


def negate(cone: Cone) -> Cone:
    """Closure-complement; axis shifted by pi, aperture ``2pi - ap``."""
    flipped = geometry.flip_axes(cone.axes.data)
    return Cone(ad.offset(cone.axes, flipped), ad.subtract(geometry.TWO_PI, cone.apertures))


def union_dnf(branches: Sequence[Sequence[Cone]]) -> list:
    """Disjunction as the concatenation of conjunct lists."""
    if not branches:
        raise InvalidEmbeddingError("union needs at least one branch")
    out = []
    for branch in branches:
        out.extend(branch)
    return out


def union_demorgan(cones: Sequence[Cone], params: ModelParams, dropout_rate=0.0,
                   training=False, rng=None) -> Cone:
    """Union approximated as ``not(and(not a, not b, ...))``: always one cone."""
    return negate(intersect([negate(c) for c in cones], params, dropout_rate, training, rng))


# distances

def _outside_terms(v, cone: Cone):
    half = ad.multiply(cone.apertures, 0.5)
    lower = ad.subtract(cone.axes, half)
    upper = ad.add(cone.axes, half)
    near_lower = ad.abs_(ad.sin(ad.multiply(ad.subtract(v, lower), 0.5)))
    near_upper = ad.abs_(ad.sin(ad.multiply(ad.subtract(v, upper), 0.5)))
    inside = geometry.inside_mask(v.data, cone.axes.data, cone.apertures.data)
    return ad.where(inside, 0.0, ad.minimum(near_lower, near_upper))


def _inside_terms(v, cone: Cone):
    to_axis = ad.abs_(ad.sin(ad.multiply(ad.subtract(v, cone.axes), 0.5)))
    cap = ad.abs_(ad.sin(ad.multiply(cone.apertures, 0.5)))
    return ad.minimum(to_axis, cap)


def cone_distance(entity_axes, cone: Cone, lam=0.02) -> Tensor:
    """Differentiable outside + ``lam`` * inside distance, summed over ``d``.

    ``entity_axes`` broadcasts against the cone, e.g. ``(batch, k, d)``
    entities against a cone reshaped to ``(batch, 1, d)``.
    """
    if not 0.0 < lam < 1.0:
        raise ConfigError(f"inside-distance weight must lie in (0, 1), got {lam}")
    v = ad.as_tensor(entity_axes)
    d_out = ad.sum_(_outside_terms(v, cone), axis=-1)
    d_in = ad.sum_(_inside_terms(v, cone), axis=-1)
    return ad.add(d_out, ad.multiply(d_in, lam))


def dnf_distance(entity_axes, conjuncts: Sequence[Cone], lam=0.02) -> Tensor:
    if not conjuncts:
        raise InvalidEmbeddingError("a DNF embedding needs at least one conjunct")
    dists = [cone_distance(entity_axes, c, lam) for c in conjuncts]
    if len(dists) == 1:
        return dists[0]
    return ad.min_(ad.stack(dists, axis=0), axis=0)


def expand_batch(cone: Cone) -> Cone:
    """Insert a candidate axis so a ``(batch, d)`` cone broadcasts over ``(batch, k, d)``."""
    b, d = cone.axes.shape
    return Cone(ad.reshape(cone.axes, (b, 1, d)), ad.reshape(cone.apertures, (b, 1, d)))


def to_cone_batch(cone: Cone) -> geometry.ConeBatch:
    """Detach into the reference type, normalizing axes and clipping apertures."""
    return geometry.ConeBatch.from_raw(cone.axes.data, cone.apertures.data)


def from_cone_batch(c: geometry.ConeBatch) -> Cone:
    return Cone(Tensor(np.array(c.axes)), Tensor(np.array(c.apertures)))
