import json
import math
from collections import Counter

import numpy as np
import pytest

from conequery import autodiff as ad
from conequery import ops
from conequery.autodiff import Tensor, grad_check
from conequery.errors import ConfigError, UsageError
from conequery.oracle import DatasetQuery, default_counts, generate_dataset, load_split
from conequery.query import parse, template
from conequery.train import (Adam, Checkpoint, Sample, TrainConfig, TrainingSet, batch_loss,
                             config_from_mapping, config_text, load_config, negative_sampling_loss,
                             read_config_text, sample_batch, train, train_step)

TINY = TrainConfig(dim=4, hidden=8, batch_size=8, negatives=4, gamma=2.0, max_steps=20,
                   learning_rate=0.01, valid_every=10, valid_queries=20, checkpoint_every=10,
                   log_every=5, seed=3)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, small_kg):
    out = tmp_path_factory.mktemp("data")
    generate_dataset(default_counts(n_train=30, n_eval=5), small_kg, 0, out)
    return out


@pytest.fixture(scope="module")
def training_set(dataset):
    return TrainingSet(load_split(dataset, "train"), 50)


def _loss_scalar(d_pos, d_negs, gamma):
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))
    return -math.log(sig(gamma - d_pos)) - sum(math.log(sig(d - gamma)) for d in d_negs) / len(d_negs)


# loss

def test_loss_at_margin_is_2ln2():
    loss = negative_sampling_loss(np.array([30.0]), np.full((1, 16), 30.0), 30.0)
    assert loss.data == pytest.approx(2 * math.log(2), abs=1e-15)


def test_loss_saturates():
    loss = negative_sampling_loss(np.array([0.0]), np.full((1, 4), 1e6), 30.0)
    assert loss.data == pytest.approx(-math.log(1 / (1 + math.exp(-30.0))), abs=1e-15)
    assert loss.data < 1e-12


def test_loss_matches_scalar_reference(rng):
    for _ in range(200):
        b, k, gamma = rng.integers(1, 5), rng.integers(1, 9), rng.uniform(1, 40)
        d_pos = rng.uniform(0, 50, b)
        d_negs = rng.uniform(0, 50, (b, k))
        want = np.mean([_loss_scalar(d_pos[i], d_negs[i], gamma) for i in range(b)])
        got = negative_sampling_loss(d_pos, d_negs, gamma).data
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_loss_gradient_signs(rng):
    for _ in range(50):
        # near the margin, where the sigmoids are not saturated and differences resolve
        gamma = rng.uniform(8, 30)
        x = gamma + rng.uniform(-6, 6, 6)
        f = lambda t: negative_sampling_loss(t[:1], ad.reshape(t[1:], (1, 5)), gamma)
        res = grad_check(f, x)
        assert res.ok
        assert res.numeric[0] > 0 and np.all(res.numeric[1:] < 0)
        assert res.analytic[0] > 0 and np.all(res.analytic[1:] < 0)


# config

def test_config_text_round_trip(tmp_path):
    cfg = TINY.replace(per_structure_batches=True)
    path = tmp_path / "c.cfg"
    path.write_text(config_text(cfg), encoding="utf-8")
    assert load_config(path, env={}) == cfg


def test_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\ndim = 16   # trailing\ngamma = 12\n", encoding="utf-8")
    assert load_config(path, env={}).dim == 16
    cfg = load_config(path, env={"CONEQ_DIM": "24", "CONEQ_GAMMA": "5"}, overrides={"gamma": "7"})
    assert (cfg.dim, cfg.gamma) == (24, 7.0)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.dim, cfg.batch_size, cfg.negatives, cfg.gamma) == (800, 128, 128, 30.0)
    assert (cfg.lambda1, cfg.lambda2, cfg.lam, cfg.dropout_rate) == (1.0, 2.0, 0.02, 0.05)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)


@pytest.mark.parametrize("values", [{"gamma": "0"}, {"lam": "1"}, {"lam": "0"}, {"negatives": "0"},
                                    {"dropout_rate": "1"}, {"dim": "x"}, {"nope": "1"},
                                    {"per_structure_batches": "maybe"}])
def test_config_validation(values):
    with pytest.raises(ConfigError):
        config_from_mapping(values)


def test_config_syntax_error():
    with pytest.raises(ConfigError):
        read_config_text("dim 3\n")


# batching

def test_negatives_exclude_answers(training_set, rng):
    for _ in range(50):
        for s in sample_batch(training_set, rng, TINY):
            assert s.positive in s.query.answers
            assert not set(s.negatives.tolist()) & s.query.answers
            assert len(s.negatives) == TINY.negatives


def test_batches_deterministic(training_set):
    a = sample_batch(training_set, np.random.default_rng(1), TINY)
    b = sample_batch(training_set, np.random.default_rng(1), TINY)
    assert [(s.query, s.positive, s.negatives.tolist()) for s in a] == \
        [(s.query, s.positive, s.negatives.tolist()) for s in b]


def test_structure_frequencies_uniform(training_set):
    rng = np.random.default_rng(0)
    cfg = TINY.replace(batch_size=1, negatives=1)
    counts = Counter(sample_batch(training_set, rng, cfg)[0].query.structure for _ in range(10000))
    m = len(training_set.structures)
    assert m == 10
    mean, sd = 10000 / m, math.sqrt(10000 * (1 / m) * (1 - 1 / m))
    for name in training_set.structures:
        assert abs(counts[name] - mean) <= 3 * sd, (name, counts[name])


def test_per_structure_batches(training_set, rng):
    batch = sample_batch(training_set, rng, TINY.replace(per_structure_batches=True))
    assert len({s.query.structure for s in batch}) == 1


def test_full_answer_queries_skipped():
    q = DatasetQuery(parse("(n (e 0))"), "custom", frozenset(), frozenset(range(3)))
    ok = DatasetQuery(parse("(p 0 (e 0))"), "1p", frozenset(), frozenset({1}))
    data = TrainingSet([q, ok], 3)
    assert data.structures == ["1p"]


# steps

def test_loss_finite_for_every_training_template(training_set):
    params = ops.ModelParams.init(50, 5, 4, 8, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    for name in training_set.structures:
        q = training_set.by_structure[name][0]
        batch = [Sample(q, int(training_set.answers(q)[0]), np.array([0, 1, 2, 3]))]
        loss, per = batch_loss(params, batch, TINY, rng)
        assert np.isfinite(loss.data) and set(per) == {name}
    assert {t.name for t in map(template, training_set.structures)} == \
        {"1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pin", "pni"}


def test_zero_learning_rate_leaves_params(training_set):
    params = ops.ModelParams.init(50, 5, 4, 8, np.random.default_rng(0))
    before = {k: v.copy() for k, v in params.state_arrays().items()}
    cfg = TINY.replace(learning_rate=0.0)
    rng = np.random.default_rng(2)
    opt = Adam(params, 0.0)
    for _ in range(3):
        train_step(params, opt, sample_batch(training_set, rng, cfg), cfg, rng)
    for k, v in params.state_arrays().items():
        assert np.array_equal(v, before[k]), k


def test_overfit_one_batch(training_set):
    params = ops.ModelParams.init(50, 5, 8, 16, np.random.default_rng(0))
    cfg = TINY.replace(dim=8, hidden=16, dropout_rate=0.0, learning_rate=0.01)
    rng = np.random.default_rng(4)
    batch = sample_batch(training_set, rng, cfg)
    opt = Adam(params, cfg.learning_rate)
    losses = [train_step(params, opt, batch, cfg, rng)[0] for _ in range(50)]
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    assert rises <= 5, losses
    assert losses[-1] < losses[0]


def _swap(params, name, tensor):
    if "." not in name:
        old = getattr(params, name)
        setattr(params, name, tensor)
        return old
    block, slot = name.split(".")
    mlp = getattr(params, block)
    seq = mlp.weights if slot[0] == "w" else mlp.biases
    old = seq[int(slot[1:])]
    seq[int(slot[1:])] = tensor
    return old


@pytest.mark.parametrize("structure, text", [("2i", "(i (p 0 (e 1)) (p 1 (e 2)))"),
                                             ("2in", "(i (p 0 (e 1)) (n (p 1 (e 2))))")])
def test_full_pipeline_gradients(structure, text):
    params = ops.ModelParams.init(6, 2, 4, 6, np.random.default_rng(11))
    cfg = TINY.replace(dropout_rate=0.0, gamma=1.0)
    q = DatasetQuery(parse(text), structure, frozenset(), frozenset({3}))
    batch = [Sample(q, 3, np.array([0, 4, 5])), Sample(q, 3, np.array([5, 0, 1]))]
    for name, tensor in params.named_parameters().items():
        def f(t, name=name):
            old = _swap(params, name, t)
            try:
                return batch_loss(params, batch, cfg, None, training=False)[0]
            finally:
                _swap(params, name, old)
        res = grad_check(f, tensor.data)
        assert res.max_error < 1e-4, (structure, name, res.max_error)
        assert len(res.excluded) < tensor.data.size, (structure, name)


# runs and checkpoints

def test_train_writes_metrics_and_checkpoints(dataset, tmp_path):
    final = train(dataset, TINY, tmp_path)
    assert final.step == 20
    assert {p.name for p in tmp_path.iterdir()} >= {"metrics.jsonl", "checkpoint-10.ckpt",
                                                     "checkpoint-20.ckpt", "final.ckpt"}
    recs = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    train_recs = [r for r in recs if r["kind"] == "train"]
    assert [r["step"] for r in train_recs] == [5, 10, 15, 20]
    assert all(r["structure_loss"] for r in train_recs)
    assert [r["step"] for r in recs if r["kind"] == "valid"] == [10, 20]


def test_checkpoint_round_trip(dataset, tmp_path):
    final = train(dataset, TINY, tmp_path, evaluate=False)
    back = Checkpoint.load(tmp_path / "final.ckpt")
    assert back.config == TINY and back.step == 20
    for k, v in final.params.state_arrays().items():
        assert np.array_equal(v, back.params.state_arrays()[k])
    back.save(tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "final.ckpt").read_bytes()


def test_train_twice_is_bit_identical(dataset, tmp_path):
    train(dataset, TINY, tmp_path / "a")
    train(dataset, TINY, tmp_path / "b")
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_resume_equals_uninterrupted(dataset, tmp_path):
    train(dataset, TINY, tmp_path / "full", evaluate=False)
    train(dataset, TINY, tmp_path / "rest", resume=tmp_path / "full" / "checkpoint-10.ckpt",
          evaluate=False)
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "rest" / "final.ckpt").read_bytes()
    full = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    rest = (tmp_path / "rest" / "metrics.jsonl").read_text().splitlines()
    assert rest == full[2:]


def test_resume_rejects_other_config(dataset, tmp_path):
    train(dataset, TINY, tmp_path / "a", evaluate=False)
    with pytest.raises(UsageError):
        train(dataset, TINY.replace(gamma=3.0), tmp_path / "b",
              resume=tmp_path / "a" / "final.ckpt", evaluate=False)
