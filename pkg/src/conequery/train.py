"""Negative-sampling training with Adam, checkpoints and resumable runs.

Checkpoint layout
-----------------
A checkpoint is an uncompressed zip archive whose members all carry the fixed
timestamp 1980-01-01 00:00:00, so identical runs produce identical bytes:

``meta.json``
    ``format_version`` (currently 1), the full training config, the step
    counter, the numpy ``PCG64`` generator state and the parameter order.
``param/<name>.npy``
    One float64 array per model parameter (numpy ``.npy`` format).
``adam_m/<name>.npy``, ``adam_v/<name>.npy``
    Adam first and second moment estimates, same names and shapes.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import os
import time
import zipfile
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import ops
from .errors import ConfigError, DataFormatError, NumericError, UsageError
from .oracle import load_meta, load_split
from .query import EmbedConfig, embed_batch, to_dnf, unparse

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ENV_PREFIX = "CONEQ_"


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 800
    hidden: int = 1600
    batch_size: int = 128
    negatives: int = 128
    gamma: float = 30.0
    max_steps: int = 300000
    learning_rate: float = 5e-5
    dropout_rate: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 2.0
    lam: float = 0.02
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    valid_every: int = 10000
    checkpoint_every: int = 10000
    log_every: int = 100
    valid_queries: int = 1000
    per_structure_batches: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if not 0.0 < self.lam < 1.0:
            raise ConfigError("lam must lie in (0, 1)")
        if self.negatives < 1:
            raise ConfigError("negatives must be at least 1")
        if self.dim < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ConfigError("dim, hidden and batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.learning_rate < 0 or self.max_steps < 0:
            raise ConfigError("learning_rate and max_steps must be non-negative")
        ops.ScaleConfig(self.lambda1, self.lambda2)

    @property
    def scale(self):
        return ops.ScaleConfig(self.lambda1, self.lambda2)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {"int": int, "float": float, "bool": bool}


def _coerce(field, raw):
    kind = _FIELD_TYPES[str(getattr(field.type, "__name__", field.type))]
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {field.name}: {raw!r}") from None


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(fields[key], raw)
    return dataclasses.replace(base or TrainConfig(), **out)


def read_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = value.strip("'\"")
    return values


def load_config(path=None, env=None, overrides=None) -> TrainConfig:
    """Config file, then ``CONEQ_<KEY>`` environment overrides, then explicit ones."""
    values = read_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    env = os.environ if env is None else env
    for f in dataclasses.fields(TrainConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in env:
            values[f.name] = env[key]
    values.update(overrides or {})
    return config_from_mapping(values)


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# loss

def negative_sampling_loss(d_pos, d_negs, gamma):
    """``-log s(gamma - d_pos) - mean_i log s(d_neg_i - gamma)``, averaged over the batch.

    ``d_pos`` has shape ``(b,)`` (or is a scalar) and ``d_negs`` ``(b, k)``
    (or ``(k,)``).  Accepts arrays or autodiff tensors.
    """
    d_pos = ad.as_tensor(d_pos)
    d_negs = ad.as_tensor(d_negs)
    pos_term = ad.log_sigmoid(ad.subtract(gamma, d_pos))
    neg_term = ad.mean(ad.log_sigmoid(ad.subtract(d_negs, gamma)), axis=-1)
    return ad.mean(ad.multiply(ad.add(pos_term, neg_term), -1.0))


# batching

@dataclass
class Sample:
    query: object
    positive: int
    negatives: np.ndarray


class TrainingSet:
    """Training queries indexed by structure, with answer sets as sorted arrays."""

    def __init__(self, queries, n_entities):
        self.n_entities = n_entities
        self.by_structure = defaultdict(list)
        skipped = 0
        for q in queries:
            ans = q.answers
            if not ans:
                continue
            if len(ans) >= n_entities:
                skipped += 1
                continue
            self.by_structure[q.structure].append(q)
        if skipped:
            log.warning("skipped %d queries whose answers cover every entity", skipped)
        self.structures = sorted(self.by_structure)
        self._answers = {id(q): np.array(sorted(q.answers), dtype=np.int64)
                         for qs in self.by_structure.values() for q in qs}
        if not self.structures:
            raise DataFormatError("training set is empty")

    def answers(self, q):
        return self._answers[id(q)]


def _negatives(rng, n_entities, answers, k):
    out = np.empty(0, dtype=np.int64)
    while out.size < k:
        draw = rng.integers(0, n_entities, size=2 * k)
        draw = draw[~np.isin(draw, answers)]
        out = np.concatenate([out, draw])
    return out[:k]


def sample_batch(data: TrainingSet, rng, config: TrainConfig) -> list:
    """Uniform structure, uniform query, uniform positive, uniform non-answer negatives."""
    if config.per_structure_batches:
        names = [data.structures[rng.integers(len(data.structures))]] * config.batch_size
    else:
        picks = rng.integers(len(data.structures), size=config.batch_size)
        names = [data.structures[i] for i in picks]
    batch = []
    for name in names:
        pool = data.by_structure[name]
        q = pool[rng.integers(len(pool))]
        ans = data.answers(q)
        pos = int(ans[rng.integers(len(ans))])
        batch.append(Sample(q, pos, _negatives(rng, data.n_entities, ans, config.negatives)))
    return batch


# optimisation

class Adam:
    def __init__(self, params: ops.ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        named = params.named_parameters()
        self.m = {k: np.zeros_like(v.data) for k, v in named.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in named.items()}

    def update(self, params: ops.ModelParams, grads: dict):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, tensor in params.named_parameters().items():
            g = grads.get(tensor)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data = tensor.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss(params, batch, config: TrainConfig, rng, training=True):
    """Mean loss over the batch plus per-structure means (as floats)."""
    embed_cfg = EmbedConfig(config.scale, config.dropout_rate, training)
    groups = defaultdict(list)
    for s in batch:
        groups[s.query.structure].append(s)
    total = None
    per_structure = {}
    for name in sorted(groups):
        samples = groups[name]
        graphs = [to_dnf(s.query.graph) for s in samples]
        cones = embed_batch(graphs, params, embed_cfg, rng)
        ids = np.column_stack([np.array([s.positive for s in samples]),
                               np.stack([s.negatives for s in samples])])
        v = ad.take_rows(params.entity_axes, ids)
        dist = ops.dnf_distance(v, [ops.expand_batch(c) for c in cones], config.lam)
        loss = negative_sampling_loss(dist[:, 0], dist[:, 1:], config.gamma)
        per_structure[name] = float(loss.data)
        weighted = ad.multiply(loss, len(samples) / len(batch))
        total = weighted if total is None else ad.add(total, weighted)
    return total, per_structure


def train_step(params, optimizer: Adam, batch, config: TrainConfig, rng, step=None):
    """One forward/backward/Adam update; returns ``(loss, per-structure losses)``."""
    try:
        with ad.Tape() as tape:
            loss, per_structure = batch_loss(params, batch, config, rng, training=True)
        grads = tape.backward(loss)
    except NumericError as exc:
        detail = [(s.query.structure, unparse(s.query.graph), s.positive) for s in batch[:5]]
        raise NumericError(exc.op, f"non-finite value in op '{exc.op}' at step {step}; "
                                   f"first samples: {detail}") from exc
    optimizer.update(params, grads)
    return float(loss.data), per_structure


# checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ops.ModelParams
    optimizer: Adam
    step: int
    rng_state: dict
    format_version: int = CHECKPOINT_VERSION

    def save(self, path):
        path = Path(path)
        names = list(self.params.named_parameters())
        meta = {"format_version": self.format_version, "config": dataclasses.asdict(self.config),
                "step": self.step, "adam_step": self.optimizer.step_count,
                "rng_state": self.rng_state, "parameters": names}
        tmp = path.with_suffix(path.suffix + ".tmp")
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            def put(name, data):
                info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)

            put("meta.json", json.dumps(meta, sort_keys=True).encode("utf-8"))
            arrays = self.params.state_arrays()
            for name in names:
                put(f"param/{name}.npy", _npy_bytes(arrays[name]))
                put(f"adam_m/{name}.npy", _npy_bytes(self.optimizer.m[name]))
                put(f"adam_v/{name}.npy", _npy_bytes(self.optimizer.v[name]))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise DataFormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")

            def arr(name):
                return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

            names = meta["parameters"]
            params = ops.ModelParams.from_arrays({n: arr(f"param/{n}.npy") for n in names})
            config = TrainConfig(**meta["config"])
            opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
            opt.step_count = meta["adam_step"]
            for n in names:
                opt.m[n] = arr(f"adam_m/{n}.npy")
                opt.v[n] = arr(f"adam_v/{n}.npy")
        return cls(config, params, opt, meta["step"], meta["rng_state"])


# loop

def _rng_from_state(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def init_run(config: TrainConfig, n_entities, n_relations):
    init_rng = np.random.default_rng([config.seed, 0])
    params = ops.ModelParams.init(n_entities, n_relations, config.dim, config.hidden, init_rng)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    return params, opt, rng


def train(data_dir, config: TrainConfig, out_dir, resume=None, evaluate=True):
    """Run (or resume) training; returns the final :class:`Checkpoint`.

    Writes ``metrics.jsonl`` (one JSON record per logged step or validation),
    ``checkpoint-<step>.ckpt`` every ``checkpoint_every`` steps and
    ``final.ckpt`` at the end.
    """
    from .evaluate import mrr

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = load_meta(data_dir)
    data = TrainingSet(load_split(data_dir, "train"), meta["n_entities"])
    valid = []
    if evaluate and config.valid_every > 0 and (Path(data_dir) / "queries-valid.txt").exists():
        valid = load_split(data_dir, "valid")[: config.valid_queries]

    if resume is not None:
        ck = Checkpoint.load(resume)
        if ck.config != config:
            raise UsageError("resume config differs from the checkpoint's config")
        params, opt, step = ck.params, ck.optimizer, ck.step
        rng = _rng_from_state(ck.rng_state)
    else:
        params, opt, rng = init_run(config, meta["n_entities"], meta["n_relations"])
        step = 0

    metrics = open(out / "metrics.jsonl", "a", encoding="utf-8")
    window = defaultdict(list)
    losses = []
    start = time.perf_counter()
    try:
        while step < config.max_steps:
            batch = sample_batch(data, rng, config)
            loss, per_structure = train_step(params, opt, batch, config, rng, step)
            step += 1
            losses.append(loss)
            for name, value in per_structure.items():
                window[name].append(value)
            if step % config.log_every == 0 or step == config.max_steps:
                rec = {"kind": "train", "step": step, "loss": float(np.mean(losses)),
                       "structure_loss": {k: float(np.mean(v)) for k, v in sorted(window.items())}}
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics.flush()
                losses.clear()
                window.clear()
            if valid and (step % config.valid_every == 0 or step == config.max_steps):
                report = mrr(valid, params, lam=config.lam, scale=config.scale)
                rec = {"kind": "valid", "step": step, "mrr": report.average,
                       "structure_mrr": report.per_structure}
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics.flush()
                log.info("step %d valid MRR %.4f", step, report.average)
            if config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
                Checkpoint(config, params, opt, step, rng.bit_generator.state).save(
                    out / f"checkpoint-{step}.ckpt")
    finally:
        metrics.close()
    final = Checkpoint(config, params, opt, step, rng.bit_generator.state)
    final.save(out / "final.ckpt")
    log.info("trained %d steps in %.1fs", step, time.perf_counter() - start)
    return final
