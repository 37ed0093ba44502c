"""Prompt rendering and output parsing for the recall and reason tasks.

Templates are versioned plain-text resources with named placeholders;
the version string travels with emitted tuning data and prediction
records so training and inference prompts provably match.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .corpus import Example
from .pair_index import EntityPair

PAIR_SEPARATOR = "|"

_ENUM_PREFIX = re.compile(r"^\s*(?:[-*]|\d+[.)])\s+")
_LABEL_NORM = re.compile(r"[\s_]+")

DEFAULT_RECALL_TEMPLATE = (
    "Task: recall entity pairs.\n"
    "Given the sentence below and its marked head and tail entities, write "
    "{k} entity pairs from other sentences that express the same relation.\n"
    "Write one pair per line in the format: head {sep} tail\n"
    "Sentence: {sentence}\n"
    "Head: {head}\n"
    "Tail: {tail}\n"
    "Pairs:\n"
)

DEFAULT_REASON_INSTRUCTION = (
    "Task: identify the relation between the head and tail entity in the "
    "last sentence, using the solved examples above it.\n\n"
)

DEFAULT_DEMO_TEMPLATE = (
    "Sentence: {sentence}\nHead: {head}\nTail: {tail}\nRelation: {relation}\n\n"
)

DEFAULT_QUERY_TEMPLATE = (
    "Sentence: {sentence}\nHead: {head}\nTail: {tail}\nRelation:"
)


@dataclass(frozen=True)
class TemplateSet:
    """The prompt templates in use, identified by a version string."""

    version: str = "v1"
    recall: str = DEFAULT_RECALL_TEMPLATE
    reason_instruction: str = DEFAULT_REASON_INSTRUCTION
    demo: str = DEFAULT_DEMO_TEMPLATE
    query: str = DEFAULT_QUERY_TEMPLATE

    @classmethod
    def load(cls, directory: str | Path) -> "TemplateSet":
        """Load templates from a directory of plain-text files.

        Expects version.txt, recall.txt, reason_instruction.txt, demo.txt,
        query.txt; missing files keep their defaults.
        """
        d = Path(directory)
        kwargs = {}
        names = {
            "version": "version.txt",
            "recall": "recall.txt",
            "reason_instruction": "reason_instruction.txt",
            "demo": "demo.txt",
            "query": "query.txt",
        }
        for attr, fname in names.items():
            f = d / fname
            if f.exists():
                text = f.read_text(encoding="utf-8")
                kwargs[attr] = text.strip() if attr == "version" else text
        return cls(**kwargs)


DEFAULT_TEMPLATES = TemplateSet()


@dataclass(frozen=True)
class PromptText:
    """A rendered prompt plus what it was rendered for."""

    text: str
    kind: str  # "recall" or "reason"
    rendered_count: int  # requested k (recall) or demo count (reason)
    template_version: str = DEFAULT_TEMPLATES.version


def format_pair_line(pair: EntityPair) -> str:
    return f"{pair.head} {PAIR_SEPARATOR} {pair.tail}"


def format_pair_lines(pairs: Iterable[EntityPair]) -> str:
    return "\n".join(format_pair_line(p) for p in pairs)


def render_recall_prompt(example: Example, k: int,
                         templates: TemplateSet = DEFAULT_TEMPLATES) -> PromptText:
    """Render the recall instruction asking for k same-relation entity pairs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    text = templates.recall.format(
        k=k,
        sep=PAIR_SEPARATOR,
        sentence=example.sentence,
        head=example.head.text,
        tail=example.tail.text,
    )
    return PromptText(text=text, kind="recall", rendered_count=k,
                      template_version=templates.version)


@dataclass
class ParsedPairs:
    """Entity pairs recovered from raw recall output, plus parse diagnostics."""

    pairs: list[EntityPair] = field(default_factory=list)
    issues: list[tuple[int, str]] = field(default_factory=list)  # (line, reason)


def parse_entity_pairs(raw: str, k: int) -> ParsedPairs:
    """Parse up to k "head | tail" lines; malformed lines are reported, not fatal."""
    result = ParsedPairs()
    if not raw.strip():
        result.issues.append((0, "empty output"))
        return result
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        if len(result.pairs) >= k:
            result.issues.append((lineno, f"extra line beyond requested {k} pairs"))
            continue
        stripped = _ENUM_PREFIX.sub("", line)
        parts = stripped.split(PAIR_SEPARATOR)
        if len(parts) != 2:
            result.issues.append(
                (lineno, f"expected exactly one '{PAIR_SEPARATOR}' separator"))
            continue
        head, tail = parts[0].strip(), parts[1].strip()
        if not head or not tail:
            result.issues.append((lineno, "empty head or tail surface"))
            continue
        result.pairs.append(EntityPair(head=head, tail=tail))
    return result


def render_reason_prompt(example: Example, demos: Sequence[Example],
                         templates: TemplateSet = DEFAULT_TEMPLATES) -> PromptText:
    """Render the in-context prompt: demonstrations then the unfilled test example."""
    parts = [templates.reason_instruction]
    for demo in demos:
        parts.append(templates.demo.format(
            sentence=demo.sentence,
            head=demo.head.text,
            tail=demo.tail.text,
            relation=demo.relation,
        ))
    parts.append(templates.query.format(
        sentence=example.sentence,
        head=example.head.text,
        tail=example.tail.text,
    ))
    return PromptText(text="".join(parts), kind="reason",
                      rendered_count=len(demos),
                      template_version=templates.version)


def _normalize_label(label: str) -> str:
    return _LABEL_NORM.sub(" ", label.strip().casefold())


def _edit_distance_at_most_one(a: str, b: str) -> bool:
    if abs(len(a) - len(b)) > 1:
        return False
    if a == b:
        return True
    if len(a) == len(b):
        return sum(x != y for x, y in zip(a, b)) == 1
    if len(a) > len(b):
        a, b = b, a
    # one insertion turns a into b
    for i in range(len(b)):
        if a == b[:i] + b[i + 1:]:
            return True
    return False


def parse_relation(raw: str, schema: Iterable[str], na_label: str,
                   fuzzy: bool = False) -> tuple[str, bool]:
    """Map raw model output to a schema label (or NA).

    Only the first line is considered. Matching is on normalized text
    (trim, casefold, whitespace/underscore collapse). Unmatched output
    falls back to the NA label with parse_ok False; optional fuzzy
    matching accepts a unique label within edit distance 1.
    """
    labels = list(schema) + [na_label]
    first_line = raw.strip().splitlines()[0] if raw.strip() else ""
    norm = _normalize_label(first_line)
    by_norm = {_normalize_label(lbl): lbl for lbl in labels}
    if norm in by_norm:
        return by_norm[norm], True
    if fuzzy and norm:
        close = [lbl for n, lbl in by_norm.items()
                 if _edit_distance_at_most_one(norm, n)]
        if len(close) == 1:
            return close[0], True
    return na_label, False
