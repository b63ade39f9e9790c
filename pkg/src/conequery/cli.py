"""Command-line entry point: ``conequery <command> [options]``.

Commands that write files put them in a run directory
``<out>/<UTC timestamp>-seed<seed>/`` (or straight into ``<out>`` with
``--flat``) together with one ``manifest.json``.  Failures print a single JSON
error record on stderr and exit with the error class's code.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConeQueryError, UsageError

log = logging.getLogger("conequery")

EXIT_MISSING_FILE = 11
EXIT_INTERNAL = 70


# run bookkeeping

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class Run:
    """Output directory plus the manifest written when the command ends."""

    def __init__(self, args, seed):
        self.args = args
        self.seed = seed
        self.start = time.perf_counter()
        self.inputs = {}
        self.outputs = []
        self.config = None
        if args.flat:
            self.dir = Path(args.out)
        else:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
            self.dir = Path(args.out) / f"{stamp}-seed{seed}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def input(self, path):
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(str(p))
        self.inputs[str(p)] = _digest(p)

    def output(self, name) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def finish(self, extra=None):
        import scipy

        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "wall_clock_seconds": round(time.perf_counter() - self.start, 3),
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "versions": {"conequery": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
        }
        if extra:
            manifest.update(extra)
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                                encoding="utf-8")
        print(json.dumps({"run_dir": str(self.dir)}))


def _write_summary(run: Run, rows, records):
    with open(run.output("summary.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["structure", "metric", "value"])
        for row in rows:
            w.writerow(row)
    with open(run.output("metrics.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _tiers_from(data_dir):
    from .store import load_tiers

    p = Path(data_dir)
    if p.is_dir() and (p / "index.json").exists():
        return load_tiers(p / "index.json")
    return load_tiers(p)


# commands

def cmd_ingest(args):
    from .store import ingest_dir, save_index

    run = Run(args, args.seed or 0)
    for name in ("train.tsv", "valid.tsv", "test.tsv"):
        run.input(Path(args.data_dir) / name)
    tiers = ingest_dir(args.data_dir)
    save_index(tiers, run.output("index.json"))
    stats = {t.tier: t.store.stats() for t in tiers}
    run.finish({"stats": stats})


def cmd_make_toy(args):
    from .synthetic import clustered_kg, random_kg, write_tsv

    seed = args.seed or 0
    run = Run(args, seed)
    rng = np.random.default_rng(seed)
    if args.kind == "clustered":
        tiers = clustered_kg(args.entities, args.relations, args.clusters, rng)
    else:
        tiers = random_kg(args.entities, args.relations, args.triples, rng)
    write_tsv(tiers, run.dir)
    run.outputs += ["train.tsv", "valid.tsv", "test.tsv", "entities.tsv", "relations.tsv"]
    run.finish()


def cmd_sample(args):
    from .oracle import default_counts, generate_dataset
    from .store import save_index

    seed = args.seed or 0
    run = Run(args, seed)
    run.input(args.data_dir)
    tiers = _tiers_from(args.data_dir)
    counts = default_counts(args.n_train, args.n_eval, args.negation_share)
    summary = generate_dataset(counts, tiers, seed, run.dir)
    save_index(tiers, run.output("index.json"))
    for split in ("train", "valid", "test"):
        run.outputs += [f"queries-{split}.txt", f"answers-{split}.txt"]
    run.outputs.append("meta.json")
    run.finish({"shortfall": summary["shortfall"]})


def _load_train_config(args):
    from .train import load_config

    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    return load_config(args.config, overrides=overrides)


def cmd_train(args):
    from .train import config_text, train

    if args.threads not in (None, 1):
        raise UsageError("train is single-threaded; --threads must be 1")
    config = _load_train_config(args)
    run = Run(args, config.seed)
    run.config = dataclasses.asdict(config)
    if args.config:
        run.input(args.config)
    run.input(args.data)
    if args.checkpoint:
        run.input(args.checkpoint)
    run.output("config.txt").write_text(config_text(config), encoding="utf-8")
    final = train(args.data, config, run.dir, resume=args.checkpoint, evaluate=not args.no_valid)
    run.outputs += sorted(p.name for p in run.dir.glob("*.ckpt")) + ["metrics.jsonl"]
    run.finish({"steps": final.step})


def cmd_eval(args):
    from .evaluate import mrr, random_baseline
    from .oracle import load_split
    from .train import Checkpoint

    ck = Checkpoint.load(args.checkpoint)
    run = Run(args, ck.config.seed if args.seed is None else args.seed)
    run.config = dataclasses.asdict(ck.config)
    run.input(args.checkpoint)
    run.input(args.data_dir)
    queries = load_split(args.data_dir, args.split)
    if args.structures:
        keep = set(args.structures.split(","))
        queries = [q for q in queries if q.structure in keep]
    if not queries:
        raise UsageError("no queries selected for evaluation")
    rows, records = [], []
    for union in args.union.split(","):
        report = mrr(queries, ck.params, ck.config.lam, ck.config.scale, union, args.threads or 1)
        suffix = "" if union == "dnf" else "_demorgan"
        for name, value in report.per_structure.items():
            rows.append([name, "mrr" + suffix, f"{value:.6f}"])
        rows.append(["AVG", "mrr" + suffix, f"{report.average:.6f}"])
        records.append({"kind": "eval", "split": args.split, "union": union, "pairs": report.pairs,
                        "average": report.average, "structure_mrr": report.per_structure})
    baseline = {}
    for q in queries:
        if q.hard:
            baseline.setdefault(q.structure, []).append(random_baseline(ck.params.n_entities - len(q.answers)))
    for name, vals in sorted(baseline.items()):
        rows.append([name, "random_baseline", f"{float(np.mean(vals)):.6f}"])
    records.append({"kind": "baseline", "split": args.split,
                    "structure_baseline": {k: float(np.mean(v)) for k, v in sorted(baseline.items())}})
    _write_summary(run, rows, records)
    run.finish()


def cmd_analyze(args):
    from . import evaluate as ev
    from .oracle import load_split
    from .train import Checkpoint

    ck = Checkpoint.load(args.checkpoint)
    seed = ck.config.seed if args.seed is None else args.seed
    run = Run(args, seed)
    run.config = dataclasses.asdict(ck.config)
    run.input(args.checkpoint)
    run.input(args.data_dir)
    params, scale = ck.params, ck.config.scale
    rng = np.random.default_rng(seed)
    rows, records = [], []

    queries = load_split(args.data_dir, args.split)
    for rep in ev.aperture_cardinality_analysis(queries, params, scale):
        rows += [[rep.structure, "spearman", f"{rep.spearman:.6f}"],
                 [rep.structure, "pearson", f"{rep.pearson:.6f}"],
                 [rep.structure, "correlation_degenerate", int(rep.degenerate)]]
        records.append({"kind": "correlation", **dataclasses.asdict(rep)})

    ratios = {
        "projection_containment": ev.projection_containment_experiment(params, args.pairs, rng, scale),
        "intersection_overlap": ev.intersection_overlap_experiment(params, args.pairs, rng),
        "demorgan_overlap": ev.demorgan_discrepancy_experiment(params, args.pairs, rng),
    }
    tiers = _tiers_from(args.data_dir)
    empty = ev.empty_intersection_experiment(tiers[args.split], params, args.pairs, rng, scale)
    ratios["empty_intersection_auc"] = empty.roc_auc
    pr = ev.membership_precision_recall(queries, params, args.fraction, scale)
    ratios["membership_precision"] = pr.precision
    ratios["membership_recall"] = pr.recall
    for name, value in ratios.items():
        rows.append(["ALL", name, f"{value:.6f}"])
    records.append({"kind": "experiments", "seed": seed, "pairs": args.pairs, **ratios,
                    "empty_intersection": dataclasses.asdict(empty),
                    "membership_no_predictions": pr.no_predictions})
    _write_summary(run, rows, records)
    run.finish()


def cmd_oracle(args):
    from .oracle import brute_force_answers, traverse_answers
    from .query import parse

    tiers = _tiers_from(args.data_dir)
    tier = tiers[args.tier]
    answer = brute_force_answers if args.brute_force else traverse_answers
    names = tier.store.entities
    for line in sys.stdin:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        ids = sorted(answer(parse(text, tier.store), tier))
        print(json.dumps({"query": text, "answers": ids, "names": [names.name(i) for i in ids]}))


def cmd_selftest(args):
    from .selftest import run

    results = run(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--log-level", default="WARNING")

    outp = argparse.ArgumentParser(add_help=False)
    outp.add_argument("--out", required=True, help="root directory for the run directory")
    outp.add_argument("--flat", action="store_true", help="write into --out directly")

    p = _Parser(prog="conequery", description="Cone embeddings for logical queries over knowledge graphs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("ingest", parents=[common, outp], help="read TSV triples into a JSON index")
    s.add_argument("--data-dir", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("make-toy", parents=[common, outp], help="write a small synthetic KG as TSV")
    s.add_argument("--kind", choices=("clustered", "random"), default="clustered")
    s.add_argument("--entities", type=int, default=64)
    s.add_argument("--relations", type=int, default=4)
    s.add_argument("--clusters", type=int, default=8)
    s.add_argument("--triples", type=int, default=400)
    s.set_defaults(fn=cmd_make_toy)

    s = sub.add_parser("sample-queries", parents=[common, outp], help="generate query datasets")
    s.add_argument("--data-dir", required=True, help="TSV directory or index.json")
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-eval", type=int, default=100)
    s.add_argument("--negation-share", type=float, default=0.1)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("train", parents=[common, outp], help="train a model")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="dataset directory from sample-queries")
    s.add_argument("--checkpoint", help="resume from this checkpoint")
    s.add_argument("--steps", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--no-valid", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common, outp], help="filtered MRR of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--structures", help="comma-separated subset")
    s.add_argument("--union", default="dnf", help="dnf, demorgan or dnf,demorgan")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("analyze", parents=[common, outp], help="correlation and set-operation studies")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--pairs", type=int, default=1000)
    s.add_argument("--fraction", type=float, default=0.625)
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("oracle", parents=[common], help="answer s-expressions read from stdin")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--tier", choices=("train", "valid", "test"), default="test")
    s.add_argument("--brute-force", action="store_true")
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("selftest", parents=[common], help="run quick property checks")
    s.set_defaults(fn=cmd_selftest)
    return p


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), exc.exit_code)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "union", None):
        bad = set(args.union.split(",")) - {"dnf", "demorgan"}
        if bad:
            return _fail("UsageError", f"unknown union mode(s) {sorted(bad)}", UsageError.exit_code)
    try:
        return args.fn(args) or 0
    except ConeQueryError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code)
    except FileNotFoundError as exc:
        return _fail("MissingFile", str(exc), EXIT_MISSING_FILE)
    except Exception as exc:  # unexpected: still emit a machine-readable record
        log.debug("internal error", exc_info=True)
        return _fail(type(exc).__name__, str(exc), EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
