"""Instruction-tuning dataset emission for the recall and reason tasks.

Produces prompt/completion JSONL consumable by any fine-tuning pipeline,
a manifest with counts and reproducibility info, and a training-config
sidecar. Reason instances optionally get distractor noise: a random
number of demonstration slots replaced by different-relation examples.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .corpus import Corpus, Example
from .pair_index import (PairIndex, EntityPair, retrieve,
                         sample_supervision_pairs, sample_distractors)
from .prompting import (TemplateSet, DEFAULT_TEMPLATES, format_pair_lines,
                        render_recall_prompt, render_reason_prompt)

RECALL_TASK = "recall"
REASON_TASK = "reason"

DEFAULT_TRAINING_CONFIG = {
    "rank": 8,
    "alpha": 32,
    "epochs": 5,
    "batch_size": 4,
    "lr": 1e-4,
    "k": 5,
}


@dataclass(frozen=True)
class TuningInstance:
    """One emitted prompt/completion record."""

    task: str
    example_id: str
    prompt: str
    completion: str
    meta: dict

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "example_id": self.example_id,
            "prompt": self.prompt,
            "completion": self.completion,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TuningInstance":
        return cls(task=d["task"], example_id=d["example_id"],
                   prompt=d["prompt"], completion=d["completion"],
                   meta=d["meta"])


@dataclass
class NoiseConfig:
    """Probability of noising an instance; noised instances draw
    k* ~ Uniform{1..k} distractor slots."""

    p_noise: float = 0.5

    def to_dict(self) -> dict:
        return {"p_noise": self.p_noise}


@dataclass
class EmitCounters:
    emitted: int = 0
    skipped: int = 0


def _example_rng(seed: int, task: str, example_id: str) -> random.Random:
    # string seeding is hash-randomization independent, so per-example
    # streams are stable across processes and schedules
    return random.Random(f"{seed}:{task}:{example_id}")


def emit_recall_instances(corpus: Corpus, index: PairIndex, k: int, seed: int,
                          split: str = "train",
                          templates: TemplateSet = DEFAULT_TEMPLATES,
                          counters: Optional[EmitCounters] = None,
                          ) -> Iterator[TuningInstance]:
    """One instance per training example whose relation has other pairs.

    The completion lists the sampled supervision pairs, one line each;
    examples with no candidate pairs are skipped and counted.
    """
    counters = counters if counters is not None else EmitCounters()
    for ex in corpus.split(split):
        rng = _example_rng(seed, RECALL_TASK, ex.id)
        sample = sample_supervision_pairs(index, ex, k, rng)
        if not sample.pairs:
            counters.skipped += 1
            continue
        prompt = render_recall_prompt(ex, k=len(sample.pairs),
                                      templates=templates)
        counters.emitted += 1
        yield TuningInstance(
            task=RECALL_TASK,
            example_id=ex.id,
            prompt=prompt.text,
            completion=format_pair_lines(sample.pairs),
            meta={
                "k": k,
                "n_pairs": len(sample.pairs),
                "shortfall": sample.shortfall,
                "noised": False,
                "k_star": 0,
                "seed": seed,
                "template_version": templates.version,
            },
        )


def _gold_demonstrations(index: PairIndex, example: Example,
                         pairs: list[EntityPair]) -> list[Example]:
    demos = []
    for pair in pairs:
        for candidate in retrieve(index, pair):
            if candidate.relation == example.relation:
                demos.append(candidate)
                break
    return demos


def emit_reason_instances(corpus: Corpus, index: PairIndex, k: int, seed: int,
                          noise: Optional[NoiseConfig] = None,
                          split: str = "train",
                          templates: TemplateSet = DEFAULT_TEMPLATES,
                          counters: Optional[EmitCounters] = None,
                          ) -> Iterator[TuningInstance]:
    """One in-context instance per eligible training example.

    Demonstrations are the first same-relation example per sampled pair.
    With probability p_noise, k* uniformly chosen slots are replaced by
    different-relation distractors; surviving demonstrations keep their
    order. Completion is the gold relation label.
    """
    noise = noise if noise is not None else NoiseConfig()
    counters = counters if counters is not None else EmitCounters()
    for ex in corpus.split(split):
        rng = _example_rng(seed, REASON_TASK, ex.id)
        sample = sample_supervision_pairs(index, ex, k, rng)
        demos = _gold_demonstrations(index, ex, sample.pairs)
        if not demos:
            counters.skipped += 1
            continue
        k_star = 0
        if rng.random() < noise.p_noise:
            k_star = min(rng.randint(1, k), len(demos))
            slots = rng.sample(range(len(demos)), k_star)
            distractors = sample_distractors(index, ex.relation, k_star, rng)
            for slot, repl in zip(slots, distractors.examples):
                demos[slot] = repl
        prompt = render_reason_prompt(ex, demos, templates=templates)
        counters.emitted += 1
        yield TuningInstance(
            task=REASON_TASK,
            example_id=ex.id,
            prompt=prompt.text,
            completion=ex.relation,
            meta={
                "k": k,
                "n_demos": len(demos),
                "shortfall": sample.shortfall,
                "noised": k_star >= 1,
                "k_star": k_star,
                "seed": seed,
                "template_version": templates.version,
            },
        )


def emit_training_config(**overrides) -> dict:
    """Training-config sidecar: adapter defaults, overridable per key."""
    unknown = set(overrides) - set(DEFAULT_TRAINING_CONFIG)
    if unknown:
        raise ValueError(f"unknown training-config keys: {sorted(unknown)}")
    config = dict(DEFAULT_TRAINING_CONFIG)
    config.update(overrides)
    return config


def write_jsonl(instances, path: str | Path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[TuningInstance]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TuningInstance.from_dict(json.loads(line)))
    return out


def write_tuning_dataset(corpus: Corpus, index: PairIndex, out_dir: str | Path,
                         k: int = 5, seed: int = 0,
                         noise: Optional[NoiseConfig] = None,
                         split: str = "train",
                         templates: TemplateSet = DEFAULT_TEMPLATES,
                         config_overrides: Optional[dict] = None) -> dict:
    """Emit both task files plus manifest and training-config sidecar.

    Returns the manifest. The three files (recall/reason JSONL, manifest,
    sidecar) are the entire contract with external fine-tuning.
    """
    noise = noise if noise is not None else NoiseConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    recall_counters = EmitCounters()
    reason_counters = EmitCounters()
    write_jsonl(
        emit_recall_instances(corpus, index, k, seed, split=split,
                              templates=templates, counters=recall_counters),
        out / "recall.jsonl")
    write_jsonl(
        emit_reason_instances(corpus, index, k, seed, noise=noise, split=split,
                              templates=templates, counters=reason_counters),
        out / "reason.jsonl")

    config = emit_training_config(**dict(config_overrides or {}, k=k))
    (out / "training_config.json").write_text(
        json.dumps(config, indent=2) + "\n", encoding="utf-8")

    manifest = {
        "k": k,
        "seed": seed,
        "split": split,
        "template_version": templates.version,
        "noise": noise.to_dict(),
        "source_fingerprint": index.source_fingerprint,
        "counts": {
            "recall_emitted": recall_counters.emitted,
            "recall_skipped": recall_counters.skipped,
            "reason_emitted": reason_counters.emitted,
            "reason_skipped": reason_counters.skipped,
        },
        "files": {
            "recall": "recall.jsonl",
            "reason": "reason.jsonl",
            "training_config": "training_config.json",
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
