"""Command-line surface for reproducible runs.

stdout carries machine-readable payloads only; diagnostics go to stderr.
Exit codes: 0 success, 1 validation error, 2 backend/transport failure.
Outputs are written atomically (temp file + rename) and every writing
command leaves a resolved run-config next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Optional

from . import __version__
from .backend import Backend, BackendError, load_backend
from .corpus import (CANONICAL_JSONL, TACRED_JSON, CorpusError, corpus_stats,
                     load_corpus, save_corpus)
from .evaluation import (EvaluationError, micro_f1, relevance_histogram,
                         sensitivity_replace, validness_report,
                         golden_context_partition)
from .pair_index import (IndexError_, NormConfig, build_index, load_index,
                         save_index)
from .pipeline import (FALLBACK_POLICIES, MODES, PipelineError,
                       PredictionRecord, RunAborted, recall_pairs, run_split)
from .prompting import TemplateSet, DEFAULT_TEMPLATES
from .tuning import NoiseConfig, write_tuning_dataset

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_jsonl(path: Path, records: Iterable[dict]) -> int:
    lines = [json.dumps(r, ensure_ascii=False) for r in records]
    _atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def _write_run_config(out: Path, args: argparse.Namespace,
                      extra: Optional[dict] = None) -> None:
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("func",) and not k.startswith("_")}
    resolved["tool_version"] = __version__
    resolved["template_version"] = DEFAULT_TEMPLATES.version
    if extra:
        resolved.update(extra)
    target = out / "run_config.json" if out.is_dir() else \
        out.with_suffix(out.suffix + ".run.json")
    _atomic_write_text(target, json.dumps(resolved, indent=2, default=str) + "\n")


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, ensure_ascii=False, indent=2) + "\n")


def _load_templates(args) -> TemplateSet:
    if getattr(args, "templates", None):
        return TemplateSet.load(args.templates)
    return DEFAULT_TEMPLATES


def _backend_from_args(args) -> Backend:
    return load_backend(args.backend, model=getattr(args, "model", None),
                        token_env=args.token_env,
                        max_in_flight=args.parallelism
                        if hasattr(args, "parallelism") else 4)


def _read_predictions(path: str) -> list[PredictionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(PredictionRecord.from_dict(json.loads(line)))
    return records


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.input, fmt=args.format, split_name=args.split)
    out = Path(args.out)
    save_corpus(corpus, out)
    _write_run_config(out, args)
    _emit({"splits": {k: len(v) for k, v in corpus.splits.items()},
           "relations": len(corpus.schema), "out": str(out)})
    return EXIT_OK


def cmd_index(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format, split_name=args.split)
    index = build_index(corpus, split=args.split,
                        norm_config=NormConfig(case_fold=args.case_fold))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out)
    _write_run_config(out, args,
                      extra={"source_fingerprint": index.source_fingerprint})
    _emit({"indexed_examples": len(index.example_order),
           "distinct_pairs": len(index.pair_to_examples),
           "relations": len(index.relation_to_pairs),
           "source_fingerprint": index.source_fingerprint,
           "out": str(out)})
    return EXIT_OK


def cmd_stats(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format, split_name=args.split)
    report = corpus_stats(corpus, k=args.k)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_emit_tuning(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format)
    index = load_index(args.index, corpus)
    templates = _load_templates(args)
    manifest = write_tuning_dataset(
        corpus, index, args.out, k=args.k, seed=args.seed,
        noise=NoiseConfig(p_noise=args.p_noise), split=args.split,
        templates=templates)
    _write_run_config(Path(args.out), args,
                      extra={"source_fingerprint": index.source_fingerprint})
    _emit(manifest)
    return EXIT_OK


def cmd_recall(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format)
    backend = _backend_from_args(args)
    templates = _load_templates(args)
    results = [recall_pairs(backend, ex, args.k, templates=templates).to_dict()
               for ex in corpus.split(args.split)]
    out = Path(args.out)
    n = _atomic_write_jsonl(out, results)
    _write_run_config(out, args)
    _emit({"examples": n, "out": str(out)})
    return EXIT_OK


def cmd_predict(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format)
    index = load_index(args.index, corpus)
    backend = _backend_from_args(args)
    templates = _load_templates(args)
    demos = None
    if args.demos:
        demos = json.loads(Path(args.demos).read_text(encoding="utf-8"))
    records: list[dict] = []
    aborted: Optional[RunAborted] = None
    try:
        for record in run_split(backend, index, corpus, split=args.split,
                                mode=args.mode, k=args.k,
                                parallelism=args.parallelism,
                                fallback_policy=args.fallback,
                                failure_threshold=args.failure_threshold,
                                templates=templates, demonstrations=demos):
            # wall-clock timings stay in-memory only; persisted files must be
            # byte-identical across reruns and parallelism settings
            d = record.to_dict()
            d.pop("timing", None)
            records.append(d)
    except RunAborted as exc:
        aborted = exc
    out = Path(args.out)
    n = _atomic_write_jsonl(out, records)
    _write_run_config(out, args,
                      extra={"source_fingerprint": index.source_fingerprint})
    if aborted is not None:
        print(f"run aborted: {aborted} ({n} records flushed)", file=sys.stderr)
        raise aborted
    _emit({"records": n, "out": str(out)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    gold_corpus = load_corpus(args.gold, fmt=args.format, split_name="gold")
    gold_examples = gold_corpus.split("gold") if Path(args.gold).is_file() \
        else gold_corpus.split(args.split)
    records = _read_predictions(args.pred)
    by_id = {r.example_id: r for r in records}
    missing = [ex.id for ex in gold_examples if ex.id not in by_id]
    if missing:
        raise EvaluationError(
            f"{len(missing)} gold examples have no prediction "
            f"(first: {missing[0]})")
    gold = [ex.relation for ex in gold_examples]
    pred = [by_id[ex.id].predicted for ex in gold_examples]
    failures = sum(1 for ex in gold_examples if not by_id[ex.id].parse_ok)
    na_label = args.na_label or gold_corpus.na_label
    report = micro_f1(gold, pred, na_label, parse_failure_count=failures)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_audit(args) -> int:
    records = _read_predictions(args.pred)
    report = validness_report(records)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format)
    index = load_index(args.index, corpus)
    records = _read_predictions(args.pred)
    rng = random.Random(args.seed)
    result = sensitivity_replace(records, index, rng)
    out = Path(args.out)
    _atomic_write_text(out, json.dumps(result.demonstrations, indent=2) + "\n")
    _write_run_config(out, args)
    _emit({"records": len(result.demonstrations),
           "kept_originals": result.kept_originals, "out": str(out)})
    return EXIT_OK


def cmd_relevance(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format)
    index = load_index(args.index, corpus)
    records = _read_predictions(args.pred)
    hist = relevance_histogram(records, corpus, index, k=args.k,
                               gold_split=args.split)
    if args.csv:
        _atomic_write_text(Path(args.csv), hist.to_csv())
    _emit(hist.to_dict())
    return EXIT_OK


def cmd_partition(args) -> int:
    corpus = load_corpus(args.corpus, fmt=args.format)
    index = load_index(args.index, corpus)
    records = _read_predictions(args.pred)
    part = golden_context_partition(records, corpus, index,
                                    gold_split=args.split)
    _emit(part.to_dict())
    return EXIT_OK


def _apply_config_file(parser_defaults: dict, args: argparse.Namespace) -> None:
    """Fill in values from a key=value config file for flags left at their
    parser defaults (explicit flags win; secrets never come from config)."""
    if not getattr(args, "config", None):
        return
    config: dict[str, str] = {}
    for lineno, line in enumerate(
            Path(args.config).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        config[key.strip().replace("-", "_")] = value.strip()
    for key, raw in config.items():
        if key in ("token", "api_token"):
            raise ValueError("secrets are environment-only, not config keys")
        if not hasattr(args, key):
            continue
        current = getattr(args, key)
        if key in parser_defaults and current != parser_defaults[key]:
            continue  # explicitly set on the command line
        default = parser_defaults.get(key)
        if isinstance(default, bool):
            setattr(args, key, raw.lower() in ("1", "true", "yes"))
        elif isinstance(default, int):
            setattr(args, key, int(raw))
        elif isinstance(default, float):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, raw)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override")
    p.add_argument("--format", default=CANONICAL_JSONL,
                   choices=[CANONICAL_JSONL, TACRED_JSON])


def _add_backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", required=True,
                   help="scripted-spec path or http(s) endpoint base URL")
    p.add_argument("--model", help="model id for HTTP backends")
    p.add_argument("--token-env", default="REXKIT_API_TOKEN",
                   help="environment variable holding the bearer token")
    p.add_argument("--templates", help="template directory override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rexkit",
        description="Recall-retrieve-reason relation extraction toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a dataset to canonical JSONL")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build the entity-pair index")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--case-fold", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("stats", help="corpus summary counts")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("emit-tuning", help="emit instruction-tuning datasets")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-noise", type=float, default=0.5)
    p.add_argument("--templates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_tuning)

    p = sub.add_parser("recall", help="generate entity pairs for a split")
    _add_common(p)
    _add_backend(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recall)

    p = sub.add_parser("predict", help="run the full pipeline over a split")
    _add_common(p)
    _add_backend(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", default="icl", choices=list(MODES))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--fallback", default="zero-shot",
                   choices=list(FALLBACK_POLICIES))
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--failure-threshold", type=int, default=5)
    p.add_argument("--demos",
                   help="external demonstrations JSON (id -> demo id list)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="micro-F1 excluding NA")
    _add_common(p)
    p.add_argument("--gold", required=True,
                   help="gold split file or corpus directory")
    p.add_argument("--split", default="test")
    p.add_argument("--pred", required=True)
    p.add_argument("--na-label", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="aggregate pair-grounding validness")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sensitivity",
                       help="same-relation random demonstration replacement")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("relevance", help="gold-relation demonstration histogram")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--csv", help="optional plot-data CSV output path")
    p.set_defaults(func=cmd_relevance)

    p = sub.add_parser("partition",
                       help="micro-F1 split by gold-in-context presence")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_partition)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                    for a in g.choices[args.command]._actions}
        _apply_config_file(defaults, args)
        return args.func(args)
    except (BackendError, RunAborted) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_BACKEND
    except (CorpusError, IndexError_, EvaluationError, PipelineError,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
