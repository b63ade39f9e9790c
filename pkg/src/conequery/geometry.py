"""Reference sector-cone geometry on plain numpy arrays.

A cone embedding is a Cartesian product of ``d`` two-dimensional sector-cones,
each parameterized by an axis angle in ``[-pi, pi)`` and an aperture in
``[0, 2pi]``.  Everything here is pure and non-differentiable; the trainable
operators in :mod:`conequery.ops` are checked against these functions.

Arrays may carry leading batch dimensions; the cone dimension is always last
and reductions (L1 sums, means over dimensions) run over it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidAngleError, InvalidEmbeddingError, ShapeError

PI = math.pi
TWO_PI = 2.0 * math.pi

# Arc-membership slack; keeps exact boundary points inside despite rounding.
INSIDE_TOL = 1e-12
# Replacement for an exactly-zero x coordinate in arg().
ARG_X_CLAMP = 1e-3


def normalize_angle(a):
    """Map angles to the half-open interval ``[-pi, pi)``."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidAngleError("cannot normalize a non-finite angle")
    wrapped = np.mod(arr + PI, TWO_PI) - PI
    # mod can round up to exactly 2pi for tiny negative inputs
    wrapped = np.where(wrapped >= PI, wrapped - TWO_PI, wrapped)
    out = np.where((arr >= -PI) & (arr < PI), arr, wrapped)
    if np.ndim(a) == 0:
        return float(out)
    return out


@dataclass(frozen=True, eq=False)
class ConeBatch:
    """``d`` sector-cones stored as paired axis / aperture arrays."""

    axes: np.ndarray
    apertures: np.ndarray

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=np.float64)
        aps = np.asarray(self.apertures, dtype=np.float64)
        if axes.ndim == 0 or axes.shape != aps.shape:
            raise ShapeError(f"axes {axes.shape} and apertures {aps.shape} must share a non-scalar shape")
        if axes.shape[-1] < 1:
            raise ShapeError("cone dimension must be at least 1")
        if not (np.all(np.isfinite(axes)) and np.all(np.isfinite(aps))):
            raise InvalidAngleError("cone parameters must be finite")
        if np.any(axes < -PI) or np.any(axes >= PI):
            raise InvalidAngleError("axes must lie in [-pi, pi)")
        if np.any(aps < 0) or np.any(aps > TWO_PI):
            raise InvalidAngleError("apertures must lie in [0, 2pi]")
        axes.setflags(write=False)
        aps.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "apertures", aps)

    @classmethod
    def from_raw(cls, axes, apertures) -> "ConeBatch":
        """Build from unnormalized axes; apertures are clipped to ``[0, 2pi]``."""
        return cls(normalize_angle(np.asarray(axes, dtype=np.float64)),
                   np.clip(np.asarray(apertures, dtype=np.float64), 0.0, TWO_PI))

    @property
    def d(self) -> int:
        return self.axes.shape[-1]

    @property
    def lower(self) -> np.ndarray:
        return self.axes - self.apertures / 2

    @property
    def upper(self) -> np.ndarray:
        return self.axes + self.apertures / 2

    def __eq__(self, other):
        if not isinstance(other, ConeBatch):
            return NotImplemented
        return np.array_equal(self.axes, other.axes) and np.array_equal(self.apertures, other.apertures)

    def __repr__(self):
        return f"ConeBatch(d={self.d}, shape={self.axes.shape})"


@dataclass(frozen=True, eq=False)
class EntityEmbedding:
    """An entity: a cone product whose apertures are all zero."""

    axes: np.ndarray

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=np.float64)
        if axes.ndim == 0 or axes.shape[-1] < 1:
            raise ShapeError("entity axes need a trailing dimension of size >= 1")
        if not np.all(np.isfinite(axes)):
            raise InvalidAngleError("entity axes must be finite")
        object.__setattr__(self, "axes", axes)

    @property
    def d(self) -> int:
        return self.axes.shape[-1]

    def as_cone(self) -> ConeBatch:
        return ConeBatch(normalize_angle(self.axes), np.zeros_like(self.axes))


@dataclass(frozen=True)
class DnfEmbedding:
    """A disjunction of cone products, all of the same dimension."""

    conjuncts: tuple

    def __post_init__(self):
        conj = tuple(self.conjuncts)
        if not conj:
            raise InvalidEmbeddingError("a DNF embedding needs at least one conjunct")
        if len({c.axes.shape for c in conj}) != 1:
            raise ShapeError("all conjuncts must share one shape")
        object.__setattr__(self, "conjuncts", conj)

    def __len__(self):
        return len(self.conjuncts)

    @property
    def d(self) -> int:
        return self.conjuncts[0].d


@dataclass(frozen=True)
class PlanarCoordinates:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError("x and y must have the same shape")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


def _axes_of(e) -> np.ndarray:
    return e.axes if isinstance(e, (EntityEmbedding, ConeBatch)) else np.asarray(e, dtype=np.float64)


def _check_dims(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def complement(c: ConeBatch) -> ConeBatch:
    """Closure-complement: opposite axis, aperture ``2pi - ap``."""
    return ConeBatch(flip_axes(c.axes), TWO_PI - c.apertures)


def flip_axes(axes) -> np.ndarray:
    """Opposite direction of each axis, in ``[-pi, pi)``."""
    axes = normalize_angle(axes)
    out = np.where(axes >= 0, axes - PI, axes + PI)
    # a tiny negative axis plus pi can round up to exactly pi
    return np.where(out >= PI, out - TWO_PI, out)


def arg(p: PlanarCoordinates) -> np.ndarray:
    """Four-quadrant angle of each 2D point, in ``[-pi, pi)``.

    An exactly-zero ``x`` is replaced by ``1e-3`` before dividing.
    """
    x = np.where(p.x == 0, ARG_X_CLAMP, p.x)
    y = p.y
    beta = np.arctan(y / x)
    out = np.where((x < 0) & (y > 0), beta + PI, beta)
    out = np.where((x < 0) & (y < 0), beta - PI, out)
    # (x < 0, y == 0) points at pi, which normalizes to -pi
    out = np.where((x < 0) & (y == 0), -PI, out)
    return np.where(out >= PI, out - TWO_PI, out)


def inside_mask(entity_axes, axes, apertures) -> np.ndarray:
    """True where an entity angle falls on the closed arc of a cone."""
    offset = np.mod(entity_axes - (axes - apertures / 2), TWO_PI)
    return (offset <= apertures + INSIDE_TOL) | (offset >= TWO_PI - INSIDE_TOL)


def outside_distance_terms(entity_axes, axes, apertures) -> np.ndarray:
    # offset of the entity past the lower bound, in [0, 2pi); the distance to
    # the upper bound is the same offset less the aperture
    offset = np.mod(entity_axes - (axes - apertures / 2), TWO_PI)
    inside = (offset <= apertures + INSIDE_TOL) | (offset >= TWO_PI - INSIDE_TOL)
    # outside the arc both half-angles lie in (0, pi), so the sines are non-negative
    term = np.minimum(np.sin(offset / 2), np.sin((offset - apertures) / 2))
    return np.where(inside, 0.0, term)


def inside_distance_terms(entity_axes, axes, apertures) -> np.ndarray:
    return np.minimum(np.abs(np.sin((entity_axes - axes) / 2)),
                      np.abs(np.sin(apertures / 2)))


def outside_distance(e, c: ConeBatch):
    v = _axes_of(e)
    _check_dims(v, c.axes)
    return outside_distance_terms(v, c.axes, c.apertures).sum(axis=-1)


def inside_distance(e, c: ConeBatch):
    v = _axes_of(e)
    _check_dims(v, c.axes)
    return inside_distance_terms(v, c.axes, c.apertures).sum(axis=-1)


def _check_lambda(lam):
    if not 0.0 < lam < 1.0:
        from .errors import ConfigError
        raise ConfigError(f"inside-distance weight must lie in (0, 1), got {lam}")


def cone_distance(e, c: ConeBatch, lam: float = 0.02):
    """Outside distance plus ``lam`` times the inside distance."""
    _check_lambda(lam)
    return outside_distance(e, c) + lam * inside_distance(e, c)


def dnf_distance(e, dnf: DnfEmbedding, lam: float = 0.02):
    if not isinstance(dnf, DnfEmbedding):
        dnf = DnfEmbedding(tuple(dnf))
    dists = [cone_distance(e, c, lam) for c in dnf.conjuncts]
    out = dists[0]
    for dist in dists[1:]:
        out = np.minimum(out, dist)
    return out


def _arc_overlap_raw(lo_a, ap_a, lo_b, ap_b) -> np.ndarray:
    start_a = np.mod(lo_a, TWO_PI)
    start_b = np.mod(lo_b, TWO_PI)
    end_a = start_a + ap_a
    total = np.zeros(np.broadcast(start_a, start_b).shape)
    for shift in (-TWO_PI, 0.0, TWO_PI):
        sb = start_b + shift
        total = total + np.clip(np.minimum(end_a, sb + ap_b) - np.maximum(start_a, sb), 0.0, None)
    return np.minimum(total, np.minimum(ap_a, ap_b))


def arc_overlap(a: ConeBatch, b: ConeBatch) -> np.ndarray:
    """Angular length of the intersection of two arcs, per dimension."""
    _check_dims(a.axes, b.axes)
    return _arc_overlap_raw(a.lower, a.apertures, b.lower, b.apertures)


def containment_ratio(a: ConeBatch, b: ConeBatch):
    """Mean over dimensions of ``|a & b| / |a|``."""
    _check_dims(a.axes, b.axes)
    overlap = arc_overlap(a, b)
    safe = np.where(a.apertures > 0, a.apertures, 1.0)
    point_inside = inside_mask(a.axes, b.axes, b.apertures)
    per_dim = np.where(a.apertures > 0, overlap / safe, point_inside.astype(np.float64))
    return np.clip(per_dim, 0.0, 1.0).mean(axis=-1)


def jaccard_ratio(a: ConeBatch, b: ConeBatch):
    """Mean over dimensions of ``|a & b| / |a | b|``."""
    _check_dims(a.axes, b.axes)
    overlap = arc_overlap(a, b)
    denom = a.apertures + b.apertures - overlap
    coincide = np.abs(normalize_angle(a.axes - b.axes)) <= INSIDE_TOL
    safe = np.where(denom > 0, denom, 1.0)
    per_dim = np.where(denom > 0, overlap / safe, coincide.astype(np.float64))
    return np.clip(per_dim, 0.0, 1.0).mean(axis=-1)


def membership_decide(e, dnf: DnfEmbedding, fraction: float = 0.625):
    """Majority-of-dimensions membership test against the best conjunct.

    Returns ``(is_member, inside_count)``.  The default fraction is 500/800.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not isinstance(dnf, DnfEmbedding):
        dnf = DnfEmbedding(tuple(dnf))
    v = _axes_of(e)
    counts = [inside_mask(v, c.axes, c.apertures).sum(axis=-1) for c in dnf.conjuncts]
    best = counts[0]
    for cnt in counts[1:]:
        best = np.maximum(best, cnt)
    need = math.ceil(fraction * dnf.d - 1e-9)
    if np.ndim(best) == 0:
        return bool(best >= need), int(best)
    return best >= need, best


# Exact measures of boolean combinations of arcs, used where the result is a
# union of several arcs (e.g. comparing a single cone with a true set union).

def arc_segments(arcs: Sequence[tuple]):
    """Split the circle at every arc endpoint.

    ``arcs`` holds ``(lower, aperture)`` array pairs of one broadcast shape.
    Returns ``(lengths, members)`` where ``lengths[..., s]`` is the length of
    elementary segment ``s`` and ``members[k][..., s]`` says whether segment
    ``s`` lies inside arc ``k``.
    """
    starts = [np.mod(np.asarray(lo, dtype=np.float64), TWO_PI) for lo, _ in arcs]
    ends = [np.mod(s + np.asarray(ap, dtype=np.float64), TWO_PI) for s, (_, ap) in zip(starts, arcs)]
    shape = np.broadcast_shapes(*[s.shape for s in starts], *[np.shape(ap) for _, ap in arcs])
    points = np.stack([np.broadcast_to(p, shape) for p in starts + ends], axis=-1)
    points = np.sort(points, axis=-1)
    nxt = np.concatenate([points[..., 1:], points[..., :1] + TWO_PI], axis=-1)
    lengths = nxt - points
    mids = points + lengths / 2
    members = []
    for lo, ap in arcs:
        lo = np.asarray(lo, dtype=np.float64)[..., None]
        ap = np.asarray(ap, dtype=np.float64)[..., None]
        off = np.mod(mids - lo, TWO_PI)
        full = ap >= TWO_PI
        members.append((off < ap) | full)
    return lengths, members


def cone_vs_union_jaccard(single: ConeBatch, parts: Sequence[ConeBatch]):
    """Jaccard ratio between one cone product and the exact union of others.

    Computed per dimension with exact arc arithmetic, then averaged over
    dimensions.
    """
    arcs = [(single.lower, single.apertures)] + [(p.lower, p.apertures) for p in parts]
    lengths, members = arc_segments(arcs)
    in_single = members[0]
    in_union = np.zeros_like(in_single)
    for m in members[1:]:
        in_union = in_union | m
    inter = np.where(in_single & in_union, lengths, 0.0).sum(axis=-1)
    union = np.where(in_single | in_union, lengths, 0.0).sum(axis=-1)
    safe = np.where(union > 0, union, 1.0)
    per_dim = np.where(union > 0, inter / safe, 1.0)
    return np.clip(per_dim, 0.0, 1.0).mean(axis=-1)
