"""Quick property checks runnable from an installed package (``selftest`` command).

Each check is small enough that the whole run takes a few seconds; the full
suites live in ``tests/``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import ops
from .oracle import brute_force_answers, sample_query, traverse_answers
from .query import canonical_structures, to_dnf
from .synthetic import random_kg
from .train import negative_sampling_loss


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _geometry(rng):
    c = geo.ConeBatch(rng.uniform(-math.pi, math.pi, (500, 8)), rng.uniform(0, 2 * math.pi, (500, 8)))
    back = geo.complement(geo.complement(c))
    err = max(np.abs(back.axes - c.axes).max(), np.abs(back.apertures - c.apertures).max())
    total = np.abs(geo.complement(c).apertures + c.apertures - geo.TWO_PI).max()
    e = geo.EntityEmbedding(rng.uniform(-math.pi, math.pi, (500, 8)))
    shifted = geo.EntityEmbedding(geo.normalize_angle(e.axes + geo.TWO_PI))
    per = np.abs(geo.cone_distance(e, c) - geo.cone_distance(shifted, c)).max()
    ok = err <= 1e-12 and total <= 1e-12 and per <= 1e-12
    return ok, f"involution {err:.1e}, aperture sum {total:.1e}, periodicity {per:.1e}"


def _oracle(rng):
    tiers = random_kg(30, 3, 200, rng)
    checked = 0
    for tmpl in canonical_structures():
        for _ in range(5):
            q = sample_query(tmpl, tiers, "test", rng)
            for tier in tiers:
                a = traverse_answers(q.graph, tier)
                if a != brute_force_answers(q.graph, tier) or a != traverse_answers(to_dnf(q.graph), tier):
                    return False, f"mismatch on {tmpl.name}"
                checked += 1
    return True, f"{checked} query/tier pairs agree"


def _gradients(rng):
    params = ops.ModelParams.init(6, 2, 4, 8, rng)
    cones = [ops.entity_cone(params, [0, 1]), ops.entity_cone(params, [2, 3])]
    cones = [ops.project(c, [0, 1], params) for c in cones]

    def f(t):
        c = ops.Cone(ad.getitem(t, 0), ad.add(ad.getitem(t, 1), 1.0))
        out = ops.intersect([c, cones[0], cones[1]], params)
        return ad.sum_(ops.cone_distance(params.entity_axes.data[[4, 5]], out))

    x = np.stack([rng.uniform(-2, 2, (2, 4)), rng.uniform(0.5, 4, (2, 4))])
    res = ad.grad_check(f, x)
    return res.ok, f"max rel. error {res.max_error:.1e}, excluded {len(res.excluded)}"


def _wraparound(rng):
    got = float(geo.arg(geo.PlanarCoordinates(np.array([math.cos(math.pi - 0.1) + math.cos(-math.pi + 0.2)]),
                                              np.array([math.sin(math.pi - 0.1) + math.sin(-math.pi + 0.2)])))[0])
    want = -math.pi + 0.05
    return abs(got - want) < 0.01, f"axis {got:.4f}"


def _loss(rng):
    val = float(negative_sampling_loss(np.array([30.0]), np.full((1, 4), 30.0), 30.0).data)
    return abs(val - 2 * math.log(2)) < 1e-12, f"loss {val:.6f}"


CHECKS = (("geometry", _geometry), ("oracle", _oracle), ("gradients", _gradients),
          ("wraparound", _wraparound), ("loss", _loss))


def run(seed: int = 0) -> list:
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(np.random.default_rng([seed, len(out)]))
        except Exception as exc:  # a crash is a failed check, reported not raised
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
