"""Command-line driver for the editing lab.

Every stage writes its outputs plus a ``stage.json`` (input digests,
config echo, duration). Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 acceptance-gate failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, editor, evalkit, experiments, lm
from .autodiff import NumericalError
from .world import (KnowledgeGraph, WorldError, WorldSpec, answer_weights, generate_world, ingest_triples,
                    render_training_corpus)

log = logging.getLogger("glame_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class GateFailure(RuntimeError):
    pass


def default_root() -> Path:
    return Path(os.environ.get("GLAME_LAB_DIR", "glame-runs"))


def _digest_file(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, stage: str, inputs: dict, config: dict, started: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage, "version": __version__,
        "inputs": {k: {"path": str(v), "sha256": _digest_file(v)} for k, v in inputs.items() if v},
        "config": config, "seconds": round(time.perf_counter() - started, 3),
    }
    (out / "stage.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _out(args, name: str) -> Path:
    return Path(args.out) if args.out else default_root() / name


def _load_world(path) -> KnowledgeGraph:
    if not Path(path).exists():
        raise ConfigError(f"world file {path} does not exist")
    return ingest_triples(path)


def _load_model(path) -> lm.Checkpoint:
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"no checkpoint at {path}")
    return lm.Checkpoint.load(path)


def _config_doc(args) -> dict:
    if getattr(args, "config", None):
        try:
            return json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    return {}


def _merge(cls, section: dict, overrides: dict):
    """Dataclass from a config section with non-None flag overrides on top."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    data = dict(section)
    data.update({k: v for k, v in overrides.items() if v is not None and k in names})
    if "prefix_length" in data:
        data["prefix_length"] = tuple(data["prefix_length"])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------

def cmd_world_gen(args) -> int:
    t = time.perf_counter()
    doc = _config_doc(args).get("world", {})
    spec = _merge(WorldSpec, {k: v for k, v in doc.items() if k != "seed"},
                  {"entities": args.entities, "relations": args.relations,
                   "triples_per_entity": args.per_entity})
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    g = generate_world(spec, seed)
    out = _out(args, "world")
    out.mkdir(parents=True, exist_ok=True)
    g.to_jsonl(out / "graph.jsonl")
    write_manifest(out, "world gen", {}, {"spec": asdict(spec), "seed": seed}, t)
    print(out / "graph.jsonl")
    return EXIT_OK


def cmd_corpus_render(args) -> int:
    t = time.perf_counter()
    g = _load_world(args.world)
    out = _out(args, "corpus")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w") as fh:
        for words, n in render_training_corpus(g, args.repetitions, args.seed, args.multi_hop,
                                               not args.no_essence):
            fh.write(json.dumps({"words": words, "answer": n}) + "\n")
    write_manifest(out, "corpus render", {"world": args.world},
                   {"repetitions": args.repetitions, "seed": args.seed, "multi_hop": args.multi_hop,
                    "essence": not args.no_essence}, t)
    print(out / "corpus.jsonl")
    return EXIT_OK


def cmd_lm_train(args) -> int:
    t = time.perf_counter()
    g = _load_world(args.world)
    rows = [json.loads(line) for line in Path(args.corpus).read_text().splitlines() if line.strip()]
    if not rows:
        raise ConfigError("corpus is empty")
    doc = _config_doc(args)
    spec = _merge(experiments.HostSpec, doc.get("host", {}), {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size, "local_layers": args.local_layers,
        "n_layers": args.layers, "d_model": args.d_model, "context_weight": args.context_weight,
        "train_seed": args.seed})
    tok = experiments.tokenizer_for(g)
    sentences = [(r["words"], r["answer"]) for r in rows]
    cfg = lm.ModelConfig(len(tok), spec.d_model, spec.n_layers, spec.n_heads, spec.ffn_inner,
                         local_layers=spec.local_layers, local_window=spec.local_window, seed=spec.model_seed)
    sched = lm.Schedule(epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr, seed=spec.train_seed)
    model, history = lm.train([tok.encode(w) for w, _ in sentences], cfg, tok, sched,
                              weights=answer_weights(sentences, spec.context_weight))
    out = _out(args, "model")
    model.save(out)
    (out / "history.json").write_text(json.dumps(history))
    write_manifest(out, "lm train", {"world": args.world, "corpus": args.corpus},
                   {"model": asdict(cfg), "schedule": asdict(sched)}, t)
    print(out)
    return EXIT_OK


def cmd_lm_recall(args) -> int:
    g = _load_world(args.world)
    model = _load_model(args.model)
    recall = lm.fact_recall(model, g, args.templates)
    print(json.dumps({"recall": recall, "templates": args.templates}))
    if args.min_recall is not None and recall < args.min_recall:
        raise GateFailure(f"recall {recall:.4f} below {args.min_recall}")
    return EXIT_OK


def cmd_cases_make(args) -> int:
    t = time.perf_counter()
    g = _load_world(args.world)
    cases = experiments.desk_cases(g, args.edits, args.seed, args.template)
    out = _out(args, "cases")
    out.mkdir(parents=True, exist_ok=True)
    evalkit.save_cases(out / "cases.jsonl", cases, g)
    write_manifest(out, "cases make", {"world": args.world},
                   {"edits": args.edits, "seed": args.seed, "template": args.template}, t)
    print(out / "cases.jsonl")
    return EXIT_OK


def _edit_config(args) -> editor.EditConfig:
    doc = _config_doc(args).get("edit", {})
    method = args.method.replace("-", "_") if getattr(args, "method", None) else None
    return _merge(editor.EditConfig, doc, {
        "method": method, "layer": args.layer, "init_layer": args.k, "n": args.n, "m": args.m,
        "lam": args.lam, "prefixes": args.prefixes, "max_steps": args.max_steps, "lr": args.lr,
        "encoder_lr": args.encoder_lr, "seed": args.seed})


def _covariance(args, model, g, layer: int) -> editor.CovarianceCache:
    if args.cov:
        cache = editor.CovarianceCache.load(args.cov)
        if cache.layer != layer:
            raise ConfigError(f"covariance file is for layer {cache.layer}, not {layer}")
        return cache
    return experiments.covariance_for(model, g, layer)


def _suite_job(payload):
    model_dir, world, cases_path, cov_path, config, leak, matcher, report_dir = payload
    model = lm.Checkpoint.load(model_dir)
    g = ingest_triples(world)
    cases = evalkit.load_cases(cases_path)
    cache = editor.CovarianceCache.load(cov_path)
    return experiments.run_suite(model, g, cases, cache, config, leak, matcher, report_dir)


def _run_suites(args, configs: list[editor.EditConfig], out: Path, tags: list[str]):
    """One suite per config, fanned out over ``--jobs`` processes."""
    model = _load_model(args.model)
    g = _load_world(args.world)
    if not Path(args.cases).exists():
        raise ConfigError(f"case file {args.cases} does not exist")
    out.mkdir(parents=True, exist_ok=True)
    covs = {}
    for c in configs:
        if c.layer not in covs:
            path = out / f"covariance-l{c.layer}.npz"
            _covariance(args, model, g, c.layer).save(path)
            covs[c.layer] = path
    payloads = [(args.model, args.world, args.cases, covs[c.layer], c, not args.no_leak_filter, args.matcher,
                 out / tag / "reports" if args.reports else None) for c, tag in zip(configs, tags)]
    if args.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            return list(pool.map(_suite_job, payloads))
    return [_suite_job(p) for p in payloads]


def cmd_edit_run(args) -> int:
    t = time.perf_counter()
    config = _edit_config(args)
    out = _out(args, "edits")
    (suite,) = _run_suites(args, [config], out, [config.method])
    summary = suite.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (out / "scores.csv").write_text(suite.csv())
    write_manifest(out, "edit run", {"model": args.model, "world": args.world, "cases": args.cases},
                   {"edit": config.to_dict(), "leak_filter": not args.no_leak_filter}, t)
    print(json.dumps(summary, sort_keys=True))
    failed = [r for r in suite.records if r.error]
    if failed:
        print(failed[0].error, file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval_run(args) -> int:
    t = time.perf_counter()
    g = _load_world(args.world)
    model = _load_model(args.model)
    cases = evalkit.load_cases(args.cases)
    if args.case is not None:
        cases = [c for c in cases if c.case_id == args.case]
        if not cases:
            raise ConfigError(f"no case {args.case} in {args.cases}")
    digest = model.digest()
    results = [evalkit.score_case(model, g, c, args.matcher, args.threshold, args.max_new) for c in cases]
    if model.digest() != digest:
        raise RuntimeError("scoring modified the checkpoint")
    total = evalkit.aggregate(results)
    out = _out(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.json").write_text(evalkit.scores_json(results, total))
    (out / "scores.csv").write_text(evalkit.scores_csv(results, total))
    write_manifest(out, "eval run", {"model": args.model, "world": args.world, "cases": args.cases},
                   {"matcher": args.matcher, "threshold": args.threshold, "max_new": args.max_new}, t)
    print(json.dumps(total.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    t = time.perf_counter()
    base = _edit_config(args)
    cells = [(n, m) for n in args.n_values for m in args.m_values]
    configs = [replace(base, n=n, m=m) for n, m in cells]
    out = _out(args, "sweep")
    suites = _run_suites(args, configs, out, [f"n{n}-m{m}" for n, m in cells])
    rows = ["n,m,efficacy,paraphrase,neighborhood,portability,editing,early_stop"]
    best = None
    for (n, m), s in zip(cells, suites):
        sc = s.scores()
        rows.append(f"{n},{m},{sc.efficacy:.4f},{sc.paraphrase:.4f},{sc.neighborhood:.4f},"
                    f"{sc.portability:.4f},{sc.editing:.4f},{s.early_stop_rate():.4f}")
        if best is None or sc.editing > best[2]:
            best = (n, m, sc.editing)
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    peak = {"n": best[0], "m": best[1], "editing": best[2]}
    (out / "peak.json").write_text(json.dumps(peak, indent=1))
    write_manifest(out, "sweep", {"model": args.model, "world": args.world, "cases": args.cases},
                   {"edit": base.to_dict(), "n": args.n_values, "m": args.m_values}, t)
    print("\n".join(rows))
    print(json.dumps({"peak": peak}))
    return EXIT_OK


def cmd_desk(args) -> int:
    """Train (or reuse) the desk host, edit with GLAME and ROME, and check the gates."""
    t = time.perf_counter()
    root = _out(args, "desk")
    spec = _merge(experiments.HostSpec, _config_doc(args).get("host", {}), {})
    g = spec.world()
    model = experiments.cached_host(spec, root / "hosts")
    recall = lm.fact_recall(model, g)
    config = _edit_config(args)
    cases = experiments.desk_cases(g, args.edits, args.seed or 0)
    cache = experiments.covariance_for(model, g, config.layer)
    summaries = {}
    for method in ("glame", "rome"):
        suite = experiments.run_suite(model, g, cases, cache, replace(config, method=method))
        (root / f"scores-{method}.csv").write_text(suite.csv())
        summaries[method] = suite.summary()
    report = {"recall": recall, "host": spec.digest(), **summaries}
    (root / "desk.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    write_manifest(root, "desk", {}, {"host": asdict(spec), "edit": config.to_dict(), "edits": args.edits}, t)
    print(json.dumps(report, indent=1, sort_keys=True))
    gl = summaries["glame"]
    sc = gl["scores"] or {}
    gates = {
        "recall": recall >= 0.95,
        "efficacy": sc.get("efficacy", 0) >= 95, "paraphrase": sc.get("paraphrase", 0) >= 80,
        "neighborhood": sc.get("neighborhood", 0) >= 80, "early_stop": gl["early_stop_rate"] >= 0.9,
        "portability_direction": sc.get("portability", 0) >= (summaries["rome"]["scores"] or {}).get("portability", 0),
        "frozen": all(v["all_frozen"] for v in summaries.values()),
        "drift": all(v["max_drift"] <= 0.05 for v in summaries.values()),
    }
    failed = [k for k, v in gates.items() if not v]
    if failed:
        raise GateFailure(f"gates failed: {failed}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _edit_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
    if method:
        p.add_argument("--method", choices=["glame", "rome", "glame-gnn", "glame-mlp"])
    p.add_argument("--layer", type=int)
    p.add_argument("--k", type=int, help="layer whose hidden states initialize graph nodes")
    p.add_argument("--n", type=int, help="subgraph order")
    p.add_argument("--m", type=int, help="neighbors kept per node")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--prefixes", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float, help="step size for the free value vector (rome)")
    p.add_argument("--encoder-lr", type=float, help="step size for the graph or MLP encoder weights")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON run config; flags override its fields")


def _suite_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--cov", help="precomputed covariance (.npz); estimated from the corpus otherwise")
    p.add_argument("--no-leak-filter", action="store_true")
    p.add_argument("--matcher", choices=sorted(evalkit.MATCHERS), default="fuzzy")
    p.add_argument("--reports", action="store_true", help="write one JSON report per edit")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glame-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="group", required=True)

    world = sub.add_parser("world").add_subparsers(dest="cmd", required=True)
    p = world.add_parser("gen")
    p.add_argument("--entities", type=int)
    p.add_argument("--relations", type=int)
    p.add_argument("--per-entity", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_world_gen)

    corpus = sub.add_parser("corpus").add_subparsers(dest="cmd", required=True)
    p = corpus.add_parser("render")
    p.add_argument("--world", required=True)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--multi-hop", type=float, default=0.0)
    p.add_argument("--no-essence", action="store_true", help="omit the '<entity> is a <type> .' sentences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_corpus_render)

    lmp = sub.add_parser("lm").add_subparsers(dest="cmd", required=True)
    p = lmp.add_parser("train")
    p.add_argument("--world", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--local-layers", type=int)
    p.add_argument("--context-weight", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_lm_train)
    p = lmp.add_parser("recall")
    p.add_argument("--model", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--templates", choices=["prompts", "paraphrases", "all"], default="all")
    p.add_argument("--min-recall", type=float)
    p.set_defaults(func=cmd_lm_recall)

    cases = sub.add_parser("cases").add_subparsers(dest="cmd", required=True)
    p = cases.add_parser("make")
    p.add_argument("--world", required=True)
    p.add_argument("--edits", type=int, default=50)
    p.add_argument("--template", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cases_make)

    ed = sub.add_parser("edit").add_subparsers(dest="cmd", required=True)
    p = ed.add_parser("run")
    _suite_flags(p)
    _edit_flags(p)
    p.set_defaults(func=cmd_edit_run)

    ev = sub.add_parser("eval").add_subparsers(dest="cmd", required=True)
    p = ev.add_parser("run")
    p.add_argument("--model", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--case", type=int, help="score only this case id")
    p.add_argument("--matcher", choices=sorted(evalkit.MATCHERS), default="fuzzy")
    p.add_argument("--threshold", type=float, default=90.0)
    p.add_argument("--max-new", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_run)

    p = sub.add_parser("sweep")
    _suite_flags(p)
    _edit_flags(p)
    p.add_argument("--n-values", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--m-values", type=int, nargs="+", default=list(range(5, 41, 5)))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("desk")
    _edit_flags(p, method=False)
    p.add_argument("--edits", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_desk)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, WorldError, lm.TokenizationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, lm.TrainingDiverged, editor.OptimizationDiverged, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except editor.EditError as exc:
        print(f"edit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, ArithmeticError) else EXIT_CONFIG
    except GateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
