"""Entity-pair inverted index over a training split.

Retrieval is exact match on normalized surface forms (NFC, trimmed,
internal whitespace collapsed; case-sensitive unless configured
otherwise). The index also supplies the two sampling primitives used by
training-data generation: same-relation supervision pairs and
different-relation distractors.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .corpus import Corpus, Example

INDEX_FORMAT_VERSION = 1

_WS = re.compile(r"\s+")


class IndexError_(ValueError):
    """Index construction or persistence failure."""


@dataclass(frozen=True)
class NormConfig:
    """Surface-form normalization settings for pair matching."""

    case_fold: bool = False

    def normalize(self, text: str) -> str:
        text = unicodedata.normalize("NFC", text).strip()
        text = _WS.sub(" ", text)
        if self.case_fold:
            text = text.casefold()
        return text

    def to_dict(self) -> dict:
        return {"case_fold": self.case_fold}

    @classmethod
    def from_dict(cls, d: dict) -> "NormConfig":
        return cls(case_fold=bool(d.get("case_fold", False)))


@dataclass(frozen=True)
class EntityPair:
    """A (head, tail) surface-form query, as generated or as found in data."""

    head: str
    tail: str


PairKey = tuple[str, str]  # normalized (head, tail)


def pair_key(pair: EntityPair, config: NormConfig) -> PairKey:
    return (config.normalize(pair.head), config.normalize(pair.tail))


def example_pair_key(example: Example, config: NormConfig) -> PairKey:
    return (config.normalize(example.head.text), config.normalize(example.tail.text))


def _split_fingerprint(examples: list[Example], config: NormConfig) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8"))
    for ex in examples:
        h.update(json.dumps(ex.to_dict(), sort_keys=True,
                            ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class PairIndex:
    """Immutable maps from entity pairs and relations to training examples."""

    norm_config: NormConfig
    split_name: str
    source_fingerprint: str
    pair_to_examples: dict[PairKey, list[str]]
    relation_to_pairs: dict[str, set[PairKey]]
    relation_to_examples: dict[str, list[str]]
    examples_by_id: dict[str, Example] = field(repr=False)
    example_order: list[str] = field(repr=False)  # split order, for sampling pools

    _heads_cache: Optional[set[str]] = field(default=None, repr=False, compare=False)
    _tails_cache: Optional[set[str]] = field(default=None, repr=False, compare=False)

    def heads(self) -> set[str]:
        if self._heads_cache is None:
            self._heads_cache = {h for h, _ in self.pair_to_examples}
        return self._heads_cache

    def tails(self) -> set[str]:
        if self._tails_cache is None:
            self._tails_cache = {t for _, t in self.pair_to_examples}
        return self._tails_cache


def build_index(corpus: Corpus, split: str = "train",
                norm_config: Optional[NormConfig] = None) -> PairIndex:
    """Build the pair/relation maps over one split. Deterministic given inputs."""
    config = norm_config or NormConfig()
    examples = corpus.split(split)
    if not examples:
        raise IndexError_(f"split '{split}' is empty; nothing to index")

    pair_to_examples: dict[PairKey, list[str]] = {}
    relation_to_pairs: dict[str, set[PairKey]] = {}
    relation_to_examples: dict[str, list[str]] = {}
    examples_by_id: dict[str, Example] = {}
    order: list[str] = []

    for ex in examples:
        key = example_pair_key(ex, config)
        pair_to_examples.setdefault(key, []).append(ex.id)
        relation_to_pairs.setdefault(ex.relation, set()).add(key)
        relation_to_examples.setdefault(ex.relation, []).append(ex.id)
        examples_by_id[ex.id] = ex
        order.append(ex.id)

    return PairIndex(
        norm_config=config,
        split_name=split,
        source_fingerprint=_split_fingerprint(examples, config),
        pair_to_examples=pair_to_examples,
        relation_to_pairs=relation_to_pairs,
        relation_to_examples=relation_to_examples,
        examples_by_id=examples_by_id,
        example_order=order,
    )


def retrieve(index: PairIndex, query: EntityPair) -> list[Example]:
    """Every training example whose pair exactly matches the query, in split order."""
    key = pair_key(query, index.norm_config)
    ids = index.pair_to_examples.get(key, [])
    return [index.examples_by_id[i] for i in ids]


@dataclass
class SupervisionSample:
    """Same-relation pairs sampled as recall supervision for one example."""

    pairs: list[EntityPair]
    shortfall: bool  # fewer than k candidates existed


def sample_supervision_pairs(index: PairIndex, example: Example, k: int,
                             rng: random.Random) -> SupervisionSample:
    """Uniform sample (no replacement) of up to k same-relation pairs.

    The example's own pair is excluded so training never supervises on a
    verbatim copy of the query target.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    own = example_pair_key(example, index.norm_config)
    candidates = sorted(index.relation_to_pairs.get(example.relation, set()) - {own})
    if not candidates:
        return SupervisionSample(pairs=[], shortfall=True)
    n = min(k, len(candidates))
    chosen = rng.sample(candidates, n)
    return SupervisionSample(
        pairs=[EntityPair(head=h, tail=t) for h, t in chosen],
        shortfall=len(candidates) < k,
    )


@dataclass
class DistractorSample:
    """Different-relation examples drawn as noise demonstrations."""

    examples: list[Example]
    with_replacement: bool


def sample_distractors(index: PairIndex, exclude_relation: str, m: int,
                       rng: random.Random) -> DistractorSample:
    """Uniform sample of m training examples whose relation differs.

    Falls back to sampling with replacement (flagged) when fewer than m
    eligible examples exist.
    """
    pool = [eid for eid in index.example_order
            if index.examples_by_id[eid].relation != exclude_relation]
    if not pool:
        raise IndexError_(
            f"no training examples with relation != '{exclude_relation}'")
    if m <= len(pool):
        ids = rng.sample(pool, m)
        with_replacement = False
    else:
        ids = [rng.choice(pool) for _ in range(m)]
        with_replacement = True
    return DistractorSample(
        examples=[index.examples_by_id[i] for i in ids],
        with_replacement=with_replacement,
    )


def save_index(index: PairIndex, path: str | Path) -> None:
    """Persist the index as versioned JSON (example ids only, no sentences)."""
    payload = {
        "version": INDEX_FORMAT_VERSION,
        "split": index.split_name,
        "norm_config": index.norm_config.to_dict(),
        "source_fingerprint": index.source_fingerprint,
        "pair_to_examples": [
            [list(key), ids] for key, ids in sorted(index.pair_to_examples.items())
        ],
        "relation_to_pairs": {
            rel: sorted(list(k) for k in keys)
            for rel, keys in sorted(index.relation_to_pairs.items())
        },
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def load_index(path: str | Path, corpus: Corpus) -> PairIndex:
    """Load a persisted index and verify it matches the given corpus.

    Refuses to load when the stored fingerprint does not match the
    corpus split under the stored normalization config.
    """
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != INDEX_FORMAT_VERSION:
        raise IndexError_(f"unsupported index version {payload.get('version')!r}")
    config = NormConfig.from_dict(payload["norm_config"])
    split = payload["split"]
    rebuilt = build_index(corpus, split=split, norm_config=config)
    if rebuilt.source_fingerprint != payload["source_fingerprint"]:
        raise IndexError_(
            "index fingerprint mismatch: corpus split "
            f"'{split}' differs from the indexed data")
    return rebuilt
