"""Training objectives expressed as backend scoring operations.

Everything here is a log-probability sum over backend-reported tokens:
the recall loss (mean negative log-likelihood of the supervision pairs),
the reason loss (negative log-likelihood of the gold label, in two
interpretations), their additive combination, and the marginal relation
distribution mixing per-pair conditionals with recall priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .backend import Backend
from .corpus import Example
from .pair_index import EntityPair
from .prompting import (TemplateSet, DEFAULT_TEMPLATES, format_pair_line,
                        render_recall_prompt, render_reason_prompt)

JOINT_CONTEXT = "joint-context"
LITERAL_SUM = "literal-sum"
REASON_MODES = (JOINT_CONTEXT, LITERAL_SUM)


def gold_continuation(label: str) -> str:
    # reason prompts end with "Relation:"; the scored completion starts with
    # the separating space
    return f" {label}"


def logsumexp(values: Sequence[float]) -> float:
    if not values:
        raise ValueError("logsumexp of empty sequence")
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


@dataclass
class RecallLossResult:
    loss: float
    per_pair_logprobs: list[tuple[EntityPair, float]]


def recall_loss(backend: Backend, example: Example, pairs: Sequence[EntityPair],
                templates: TemplateSet = DEFAULT_TEMPLATES) -> RecallLossResult:
    """Mean negative log-likelihood of each supervision pair line given the
    recall prompt."""
    if not pairs:
        raise ValueError("recall loss needs at least one supervision pair")
    prompt = render_recall_prompt(example, k=len(pairs), templates=templates)
    per_pair: list[tuple[EntityPair, float]] = []
    for pair in pairs:
        scored = backend.score(prompt, format_pair_line(pair))
        per_pair.append((pair, scored.total))
    loss = -math.fsum(lp for _, lp in per_pair) / len(per_pair)
    return RecallLossResult(loss=loss, per_pair_logprobs=per_pair)


def reason_loss(backend: Backend, example: Example, demos: Sequence[Example],
                gold: str, mode: str = JOINT_CONTEXT,
                templates: TemplateSet = DEFAULT_TEMPLATES) -> float:
    """Negative log-likelihood of the gold label given demonstrations.

    joint-context packs all demonstrations into one prompt (the rendered
    in-context template). literal-sum scores the label once per
    single-demonstration prompt and combines the sequence likelihoods by
    summation (via log-sum-exp), the alternative per-demo reading.
    """
    if not demos:
        raise ValueError("reason loss needs at least one demonstration")
    if mode not in REASON_MODES:
        raise ValueError(f"unknown reason-loss mode '{mode}'")
    cont = gold_continuation(gold)
    if mode == JOINT_CONTEXT:
        prompt = render_reason_prompt(example, demos, templates=templates)
        return -backend.score(prompt, cont).total
    per_demo = []
    for demo in demos:
        prompt = render_reason_prompt(example, [demo], templates=templates)
        per_demo.append(backend.score(prompt, cont).total)
    return -logsumexp(per_demo)


@dataclass
class LossBreakdown:
    """Recall, reason, and joint losses for one example (all in nats)."""

    recall_loss: float
    reason_loss: float
    joint_loss: float
    per_pair_logprobs: list[tuple[EntityPair, float]]
    mode: str

    def report_line(self, example_id: str) -> dict:
        return {
            "example_id": example_id,
            "recall_loss": self.recall_loss,
            "reason_loss": self.reason_loss,
            "joint_loss": self.joint_loss,
            "mode": self.mode,
            "per_pair": [
                {"head": p.head, "tail": p.tail, "logprob": lp}
                for p, lp in self.per_pair_logprobs
            ],
        }


def joint_loss(backend: Backend, example: Example, pairs: Sequence[EntityPair],
               demos: Sequence[Example], gold: str, mode: str = JOINT_CONTEXT,
               templates: TemplateSet = DEFAULT_TEMPLATES) -> LossBreakdown:
    """Recall loss plus reason loss; additivity is the defining invariant."""
    rec = recall_loss(backend, example, pairs, templates=templates)
    rea = reason_loss(backend, example, demos, gold, mode=mode,
                      templates=templates)
    return LossBreakdown(
        recall_loss=rec.loss,
        reason_loss=rea,
        joint_loss=rec.loss + rea,
        per_pair_logprobs=rec.per_pair_logprobs,
        mode=mode,
    )


@dataclass
class RelationDistribution:
    scores: dict[str, float]
    normalized: bool = True

    def argmax(self) -> str:
        # ties break on label order in the scores dict (schema order)
        best = None
        best_score = -math.inf
        for label, score in self.scores.items():
            if score > best_score:
                best, best_score = label, score
        assert best is not None
        return best


def _softmax(logvals: Sequence[float]) -> list[float]:
    z = logsumexp(logvals)
    return [math.exp(v - z) for v in logvals]


def marginal_relation_scores(
        backend: Backend, example: Example,
        weighted_demos: Sequence[tuple[Example, float]],
        labels: Sequence[str],
        templates: TemplateSet = DEFAULT_TEMPLATES) -> RelationDistribution:
    """Mixture of per-demonstration label distributions.

    weighted_demos pairs each retrieved demonstration with the recall
    log-prior of its entity pair; priors are renormalized over the given
    demonstrations, and each conditional is the single-demo label score
    renormalized over the label set.
    """
    if not labels:
        raise ValueError("empty label set")
    if not weighted_demos:
        raise ValueError("marginal scores need at least one demonstration")
    # deterministic accumulation order regardless of caller order
    ordered = sorted(enumerate(weighted_demos), key=lambda t: (t[1][0].id, t[0]))
    weights = _softmax([lp for _, (_, lp) in ordered])
    mixed = {label: 0.0 for label in labels}
    for w, (_, (demo, _)) in zip(weights, ordered):
        prompt = render_reason_prompt(example, [demo], templates=templates)
        label_lps = [backend.score(prompt, gold_continuation(lbl)).total
                     for lbl in labels]
        cond = _softmax(label_lps)
        for label, p in zip(labels, cond):
            mixed[label] += w * p
    total = math.fsum(mixed.values())
    scores = {label: p / total for label, p in mixed.items()}
    return RelationDistribution(scores=scores, normalized=True)
