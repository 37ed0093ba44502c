"""Evaluation and audit operations over predictions.

Micro-F1 excluding the NA label, the grounding-validness aggregate, the
demonstration-relevance histogram, the same-relation replacement pass
for sensitivity analysis, and the gold-in-context partition.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .corpus import Corpus
from .pair_index import PairIndex
from .pipeline import PredictionRecord, ValidnessBuckets


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    predicted_non_na: int
    gold_non_na: int
    parse_failure_count: int = 0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": {
                "tp": self.tp,
                "predicted_non_na": self.predicted_non_na,
                "gold_non_na": self.gold_non_na,
            },
            "parse_failure_count": self.parse_failure_count,
        }


def micro_f1(gold: Sequence[str], pred: Sequence[str], na_label: str,
             parse_failure_count: int = 0,
             gold_ids: Optional[Sequence[str]] = None,
             pred_ids: Optional[Sequence[str]] = None) -> MetricsReport:
    """Micro precision/recall/F1 with NA excluded from both denominators.

    A true positive is an exact non-NA label match. Zero denominators
    yield zero for the corresponding metric.
    """
    if len(gold) != len(pred):
        raise EvaluationError(
            f"gold/pred length mismatch: {len(gold)} vs {len(pred)}")
    if gold_ids is not None or pred_ids is not None:
        if gold_ids is None or pred_ids is None or list(gold_ids) != list(pred_ids):
            raise EvaluationError("gold/pred example ids are not aligned")
    tp = 0
    predicted_non_na = 0
    gold_non_na = 0
    for g, p in zip(gold, pred):
        if p != na_label:
            predicted_non_na += 1
        if g != na_label:
            gold_non_na += 1
        if g == p and g != na_label:
            tp += 1
    precision = tp / predicted_non_na if predicted_non_na else 0.0
    recall = tp / gold_non_na if gold_non_na else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return MetricsReport(precision=precision, recall=recall, f1=f1, tp=tp,
                         predicted_non_na=predicted_non_na,
                         gold_non_na=gold_non_na,
                         parse_failure_count=parse_failure_count)


@dataclass
class ValidnessReport:
    buckets: ValidnessBuckets
    total_generated: int
    grounded_ratio: float

    @property
    def grounded_percent(self) -> str:
        return f"{self.grounded_ratio * 100:.2f}%"

    def to_dict(self) -> dict:
        return {
            "buckets": self.buckets.to_dict(),
            "total_generated": self.total_generated,
            "grounded_ratio": self.grounded_ratio,
            "grounded_percent": self.grounded_percent,
        }


def validness_report(records: Sequence[PredictionRecord]) -> ValidnessReport:
    """Aggregate per-record grounding buckets into one report."""
    agg = ValidnessBuckets()
    for rec in records:
        v = rec.validness
        agg.pair_grounded += v.pair_grounded
        agg.entities_grounded_pair_not += v.entities_grounded_pair_not
        agg.one_entity_grounded += v.one_entity_grounded
        agg.ungrounded += v.ungrounded
    total = agg.total
    ratio = agg.pair_grounded / total if total else 0.0
    return ValidnessReport(buckets=agg, total_generated=total,
                           grounded_ratio=ratio)


@dataclass
class RelevanceHistogram:
    """Records bucketed by how many demonstrations share the gold relation."""

    buckets: dict[int, int]  # same-relation count -> number of records
    proportions: dict[int, float]
    shortfall_records: int  # records with fewer than k demonstrations
    k: int

    def to_dict(self) -> dict:
        return {
            "buckets": {str(b): n for b, n in sorted(self.buckets.items())},
            "proportions": {str(b): p for b, p in sorted(self.proportions.items())},
            "shortfall_records": self.shortfall_records,
            "k": self.k,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["bucket", "count", "proportion"])
        for b in sorted(self.buckets, reverse=True):
            writer.writerow([b, self.buckets[b], f"{self.proportions[b]:.6f}"])
        return buf.getvalue()


def relevance_histogram(records: Sequence[PredictionRecord], corpus: Corpus,
                        index: PairIndex, k: int,
                        gold_split: str = "test") -> RelevanceHistogram:
    """Count, per record, demonstrations whose relation equals the gold one."""
    gold_by_id = {ex.id: ex.relation for ex in corpus.split(gold_split)}
    buckets = {b: 0 for b in range(k + 1)}
    shortfall = 0
    for rec in records:
        if rec.example_id not in gold_by_id:
            raise EvaluationError(f"no gold label for record '{rec.example_id}'")
        gold = gold_by_id[rec.example_id]
        same = sum(1 for did in rec.demonstrations
                   if index.examples_by_id[did].relation == gold)
        if len(rec.demonstrations) < k:
            shortfall += 1
        buckets[min(same, k)] += 1
    n = len(records)
    proportions = {b: (c / n if n else 0.0) for b, c in buckets.items()}
    return RelevanceHistogram(buckets=buckets, proportions=proportions,
                              shortfall_records=shortfall, k=k)


@dataclass
class ReplacementResult:
    """Demonstration lists after same-relation random replacement."""

    demonstrations: dict[str, list[str]]  # example_id -> demo ids
    kept_originals: int  # demos with no same-relation alternative


def sensitivity_replace(records: Sequence[PredictionRecord], index: PairIndex,
                        rng: random.Random) -> ReplacementResult:
    """Replace each demonstration with a random different example of the
    same relation; demos whose relation has no alternative are kept and
    counted."""
    out: dict[str, list[str]] = {}
    kept = 0
    for rec in records:
        new_demos: list[str] = []
        for did in rec.demonstrations:
            relation = index.examples_by_id[did].relation
            pool = [eid for eid in index.relation_to_examples[relation]
                    if eid != did]
            if not pool:
                new_demos.append(did)
                kept += 1
            else:
                new_demos.append(rng.choice(pool))
        out[rec.example_id] = new_demos
    return ReplacementResult(demonstrations=out, kept_originals=kept)


@dataclass
class GoldContextPartition:
    """Records split by whether any demonstration carries the gold relation."""

    with_gold: list[str]  # example ids
    without_gold: list[str]
    metrics_with_gold: Optional[MetricsReport] = None
    metrics_without_gold: Optional[MetricsReport] = None

    def to_dict(self) -> dict:
        return {
            "with_gold": self.with_gold,
            "without_gold": self.without_gold,
            "metrics_with_gold": (self.metrics_with_gold.to_dict()
                                  if self.metrics_with_gold else None),
            "metrics_without_gold": (self.metrics_without_gold.to_dict()
                                     if self.metrics_without_gold else None),
        }


def golden_context_partition(records: Sequence[PredictionRecord],
                             corpus: Corpus, index: PairIndex,
                             gold_split: str = "test") -> GoldContextPartition:
    """Partition records by gold-relation demonstration presence and score each."""
    gold_by_id = {ex.id: ex.relation for ex in corpus.split(gold_split)}
    part_i: list[PredictionRecord] = []
    part_ii: list[PredictionRecord] = []
    for rec in records:
        gold = gold_by_id[rec.example_id]
        has_gold = any(index.examples_by_id[did].relation == gold
                       for did in rec.demonstrations)
        (part_i if has_gold else part_ii).append(rec)

    def metrics(part: list[PredictionRecord]) -> Optional[MetricsReport]:
        if not part:
            return None
        gold = [gold_by_id[r.example_id] for r in part]
        pred = [r.predicted for r in part]
        failures = sum(1 for r in part if not r.parse_ok)
        return micro_f1(gold, pred, corpus.na_label,
                        parse_failure_count=failures)

    return GoldContextPartition(
        with_gold=[r.example_id for r in part_i],
        without_gold=[r.example_id for r in part_ii],
        metrics_with_gold=metrics(part_i),
        metrics_without_gold=metrics(part_ii),
    )


def render_table(rows: Sequence[Sequence[str]], header: Sequence[str]) -> str:
    """Plain-text aligned table for report output."""
    cols = [header] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cols) for i in range(len(header))]
    lines = []
    for row in cols:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
