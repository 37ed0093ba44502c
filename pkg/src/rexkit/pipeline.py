"""End-to-end inference: recall entity pairs, audit their grounding,
retrieve demonstrations, and predict a relation.

Prediction modes: "icl" (in-context generation), "majority-vote" (most
frequent relation among retrieved demonstrations), and "marginal"
(argmax of the prior-weighted label mixture).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .backend import Backend, GenerationParams
from .corpus import Corpus, Example
from .pair_index import PairIndex, EntityPair, pair_key, retrieve
from .objectives import marginal_relation_scores
from .prompting import (TemplateSet, DEFAULT_TEMPLATES, ParsedPairs,
                        parse_entity_pairs, parse_relation,
                        render_recall_prompt, render_reason_prompt)

MODE_ICL = "icl"
MODE_MAJORITY = "majority-vote"
MODE_MARGINAL = "marginal"
MODES = (MODE_ICL, MODE_MAJORITY, MODE_MARGINAL)

FALLBACK_ZERO_SHOT = "zero-shot"
FALLBACK_NA = "na"
FALLBACK_FAIL = "fail"
FALLBACK_POLICIES = (FALLBACK_ZERO_SHOT, FALLBACK_NA, FALLBACK_FAIL)

RECALL_PARAMS = GenerationParams(max_tokens=256, temperature=0.0, stop=("\n\n",))
REASON_PARAMS = GenerationParams(max_tokens=32, temperature=0.0, stop=("\n",))


class PipelineError(Exception):
    pass


class RunAborted(PipelineError):
    """Too many consecutive example failures; earlier records were flushed."""

    def __init__(self, message: str, completed: int, failures: int):
        super().__init__(message)
        self.completed = completed
        self.failures = failures


@dataclass
class RecallResult:
    """Raw recall output and the entity pairs parsed from it."""

    example_id: str
    raw_output: str
    pairs: list[EntityPair]
    parse_issues: list[tuple[int, str]]

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "raw_output": self.raw_output,
            "pairs": [{"head": p.head, "tail": p.tail} for p in self.pairs],
            "parse_issues": [list(i) for i in self.parse_issues],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecallResult":
        return cls(
            example_id=d["example_id"],
            raw_output=d["raw_output"],
            pairs=[EntityPair(p["head"], p["tail"]) for p in d["pairs"]],
            parse_issues=[tuple(i) for i in d["parse_issues"]],
        )


@dataclass
class ValidnessBuckets:
    """Classification of generated pairs by how they ground in the corpus."""

    pair_grounded: int = 0
    entities_grounded_pair_not: int = 0
    one_entity_grounded: int = 0
    ungrounded: int = 0

    @property
    def total(self) -> int:
        return (self.pair_grounded + self.entities_grounded_pair_not
                + self.one_entity_grounded + self.ungrounded)

    def to_dict(self) -> dict:
        return {
            "pair_grounded": self.pair_grounded,
            "entities_grounded_pair_not": self.entities_grounded_pair_not,
            "one_entity_grounded": self.one_entity_grounded,
            "ungrounded": self.ungrounded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidnessBuckets":
        return cls(**d)


@dataclass
class PredictionRecord:
    """Full provenance of one test-example run."""

    example_id: str
    recall: RecallResult
    validness: ValidnessBuckets
    demonstrations: list[str]
    mode: str
    predicted: str
    parse_ok: bool
    timing: dict[str, float] = field(default_factory=dict)
    empty_retrieval: bool = False
    duplicate_pairs: int = 0
    template_version: str = DEFAULT_TEMPLATES.version

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "recall": self.recall.to_dict(),
            "validness": self.validness.to_dict(),
            "demonstrations": self.demonstrations,
            "mode": self.mode,
            "predicted": self.predicted,
            "parse_ok": self.parse_ok,
            "timing": self.timing,
            "empty_retrieval": self.empty_retrieval,
            "duplicate_pairs": self.duplicate_pairs,
            "template_version": self.template_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(
            example_id=d["example_id"],
            recall=RecallResult.from_dict(d["recall"]),
            validness=ValidnessBuckets.from_dict(d["validness"]),
            demonstrations=list(d["demonstrations"]),
            mode=d["mode"],
            predicted=d["predicted"],
            parse_ok=d["parse_ok"],
            timing=d.get("timing", {}),
            empty_retrieval=d.get("empty_retrieval", False),
            duplicate_pairs=d.get("duplicate_pairs", 0),
            template_version=d.get("template_version",
                                   DEFAULT_TEMPLATES.version),
        )


def recall_pairs(backend: Backend, example: Example, k: int,
                 templates: TemplateSet = DEFAULT_TEMPLATES) -> RecallResult:
    """Generate and parse up to k entity pairs for one test example."""
    prompt = render_recall_prompt(example, k, templates=templates)
    result = backend.generate(prompt, RECALL_PARAMS)
    parsed: ParsedPairs = parse_entity_pairs(result.text, k)
    return RecallResult(
        example_id=example.id,
        raw_output=result.text,
        pairs=parsed.pairs,
        parse_issues=parsed.issues,
    )


def audit_validness(recall: RecallResult, index: PairIndex) -> ValidnessBuckets:
    """Bucket each generated pair by grounding: full pair, both entities
    (never together), one entity, or neither. Raw pairs are counted as
    generated, duplicates included."""
    buckets = ValidnessBuckets()
    heads = index.heads()
    tails = index.tails()
    for pair in recall.pairs:
        key = pair_key(pair, index.norm_config)
        h, t = key
        if key in index.pair_to_examples:
            buckets.pair_grounded += 1
        elif h in heads and t in tails:
            buckets.entities_grounded_pair_not += 1
        elif h in heads or t in tails:
            buckets.one_entity_grounded += 1
        else:
            buckets.ungrounded += 1
    return buckets


def majority_vote(relations: Sequence[str]) -> str:
    """Most frequent label; ties break to the earliest-seen among the tied."""
    if not relations:
        raise ValueError("majority vote over empty demonstration list")
    counts: dict[str, int] = {}
    for rel in relations:
        counts[rel] = counts.get(rel, 0) + 1
    best = relations[0]
    for rel in relations:  # iteration order = first-seen order
        if counts[rel] > counts[best]:
            best = rel
    return best


def _retrieve_demonstrations(index: PairIndex, recall: RecallResult
                             ) -> tuple[list[Example], list[EntityPair], int]:
    """First-in-corpus-order demonstration per grounded pair, deduplicated."""
    demos: list[Example] = []
    demo_pairs: list[EntityPair] = []
    seen: set[str] = set()
    duplicates = 0
    for pair in recall.pairs:
        matches = retrieve(index, pair)
        if not matches:
            continue
        first = matches[0]
        if first.id in seen:
            duplicates += 1
            continue
        seen.add(first.id)
        demos.append(first)
        demo_pairs.append(pair)
    return demos, demo_pairs, duplicates


def run_example(backend: Backend, index: PairIndex, example: Example,
                schema: Sequence[str], na_label: str,
                mode: str = MODE_ICL, k: int = 5,
                fallback_policy: str = FALLBACK_ZERO_SHOT,
                templates: TemplateSet = DEFAULT_TEMPLATES,
                demonstrations_override: Optional[list[str]] = None,
                ) -> PredictionRecord:
    """Run recall -> audit -> retrieve -> predict for one example."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}'")
    if fallback_policy not in FALLBACK_POLICIES:
        raise ValueError(f"unknown fallback policy '{fallback_policy}'")

    timing: dict[str, float] = {}
    duplicates = 0

    t0 = time.perf_counter()
    if demonstrations_override is not None:
        recall = RecallResult(example_id=example.id, raw_output="", pairs=[],
                              parse_issues=[(0, "bypassed: external demonstrations")])
    else:
        recall = recall_pairs(backend, example, k, templates=templates)
    timing["recall_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    validness = audit_validness(recall, index)
    timing["audit_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if demonstrations_override is not None:
        demos = [index.examples_by_id[i] for i in demonstrations_override]
        demo_pairs: list[EntityPair] = []
    else:
        demos, demo_pairs, duplicates = _retrieve_demonstrations(index, recall)
    timing["retrieve_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    empty_retrieval = not demos
    parse_ok = True
    if empty_retrieval:
        if fallback_policy == FALLBACK_FAIL:
            raise PipelineError(
                f"no demonstrations for example '{example.id}' and "
                "fallback policy is 'fail'")
        if fallback_policy == FALLBACK_NA:
            predicted = na_label
        else:  # zero-shot reason prompt, any mode
            prompt = render_reason_prompt(example, [], templates=templates)
            gen = backend.generate(prompt, REASON_PARAMS)
            predicted, parse_ok = parse_relation(gen.text, schema, na_label)
    elif mode == MODE_ICL:
        prompt = render_reason_prompt(example, demos, templates=templates)
        gen = backend.generate(prompt, REASON_PARAMS)
        predicted, parse_ok = parse_relation(gen.text, schema, na_label)
    elif mode == MODE_MAJORITY:
        predicted = majority_vote([d.relation for d in demos])
    else:  # marginal
        if demonstrations_override is not None:
            raise PipelineError(
                "marginal mode needs recall priors; not available with "
                "external demonstrations")
        prompt = render_recall_prompt(example, k, templates=templates)
        weighted = []
        from .prompting import format_pair_line
        for demo, pair in zip(demos, demo_pairs):
            prior = backend.score(prompt, format_pair_line(pair)).total
            weighted.append((demo, prior))
        labels = list(schema) + [na_label]
        dist = marginal_relation_scores(backend, example, weighted, labels,
                                        templates=templates)
        predicted = dist.argmax()
    timing["predict_s"] = time.perf_counter() - t0

    return PredictionRecord(
        example_id=example.id,
        recall=recall,
        validness=validness,
        demonstrations=[d.id for d in demos],
        mode=mode,
        predicted=predicted,
        parse_ok=parse_ok,
        timing=timing,
        empty_retrieval=empty_retrieval,
        duplicate_pairs=duplicates,
        template_version=templates.version,
    )


def run_split(backend: Backend, index: PairIndex, corpus: Corpus,
              split: str = "test", mode: str = MODE_ICL, k: int = 5,
              parallelism: int = 1,
              fallback_policy: str = FALLBACK_ZERO_SHOT,
              failure_threshold: int = 5,
              templates: TemplateSet = DEFAULT_TEMPLATES,
              demonstrations: Optional[dict[str, list[str]]] = None,
              ) -> Iterator[PredictionRecord]:
    """Yield one record per example, in corpus order regardless of
    completion order. Aborts (raising RunAborted) after the configured
    number of consecutive failures."""
    examples = corpus.split(split)

    def task(ex: Example) -> PredictionRecord:
        override = demonstrations.get(ex.id) if demonstrations is not None else None
        return run_example(backend, index, ex, corpus.schema, corpus.na_label,
                           mode=mode, k=k, fallback_policy=fallback_policy,
                           templates=templates,
                           demonstrations_override=override)

    completed = 0
    consecutive_failures = 0
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = [pool.submit(task, ex) for ex in examples]
        try:
            for ex, fut in zip(examples, futures):
                try:
                    record = fut.result()
                except Exception as exc:
                    consecutive_failures += 1
                    if consecutive_failures >= failure_threshold:
                        raise RunAborted(
                            f"aborting at example '{ex.id}' after "
                            f"{consecutive_failures} consecutive failures: {exc}",
                            completed=completed,
                            failures=consecutive_failures) from exc
                    continue
                consecutive_failures = 0
                completed += 1
                yield record
        finally:
            for fut in futures:
                fut.cancel()
