"""Relation extraction data model and dataset ingestion.

Canonical storage is JSONL, one example per line:

    {"id": ..., "tokens": [...],
     "head": {"text": ..., "type": ..., "start": ..., "end": ...},
     "tail": {...}, "relation": ...}

A TACRED-style JSON array (subj_*/obj_* fields) is accepted as an
alternative ingest format. Text is NFC-normalized on ingest.
"""

from __future__ import annotations

import json
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

DEFAULT_NA_LABEL = "NA"
TACRED_NA_LABEL = "no_relation"

CANONICAL_JSONL = "canonical-jsonl"
TACRED_JSON = "tacred-json"


class CorpusError(ValueError):
    """Malformed corpus data. Carries the offending location when known."""

    def __init__(self, message: str, *, line: Optional[int] = None,
                 field_name: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field '{field_name}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field_name = field_name


def _nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class Mention:
    """An entity mention by surface form, with optional token span."""

    text: str
    entity_type: Optional[str] = None
    span: Optional[tuple[int, int]] = None  # (start, end), end exclusive

    def to_dict(self) -> dict:
        d: dict = {"text": self.text}
        if self.entity_type is not None:
            d["type"] = self.entity_type
        if self.span is not None:
            d["start"], d["end"] = self.span
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Mention":
        span = None
        if "start" in d or "end" in d:
            span = (int(d["start"]), int(d["end"]))
        return cls(text=_nfc(str(d["text"])), entity_type=d.get("type"), span=span)


@dataclass(frozen=True)
class Example:
    """One annotated sentence with a head/tail entity pair and a relation label."""

    id: str
    tokens: tuple[str, ...]
    head: Mention
    tail: Mention
    relation: str

    @property
    def sentence(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "head": self.head.to_dict(),
            "tail": self.tail.to_dict(),
            "relation": self.relation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        return cls(
            id=str(d["id"]),
            tokens=tuple(_nfc(str(t)) for t in d["tokens"]),
            head=Mention.from_dict(d["head"]),
            tail=Mention.from_dict(d["tail"]),
            relation=_nfc(str(d["relation"])),
        )


@dataclass
class Corpus:
    """A relation schema plus named example splits."""

    schema: list[str]
    na_label: str = DEFAULT_NA_LABEL
    splits: dict[str, list[Example]] = field(default_factory=dict)

    @property
    def labels(self) -> set[str]:
        return set(self.schema) | {self.na_label}

    def split(self, name: str) -> list[Example]:
        if name not in self.splits:
            raise KeyError(f"no split named '{name}' (have: {sorted(self.splits)})")
        return self.splits[name]


@dataclass
class ValidationReport:
    """Invariant violations found in a single example. Empty means valid."""

    example_id: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_example(example: Example, schema: Iterable[str],
                     na_label: str = DEFAULT_NA_LABEL) -> ValidationReport:
    """Check an example against the data-model invariants without mutating it."""
    report = ValidationReport(example_id=example.id)
    v = report.violations
    if len(example.tokens) < 1:
        v.append("example has no tokens")
    labels = set(schema) | {na_label}
    if example.relation not in labels:
        v.append(f"relation '{example.relation}' not in schema or NA label")
    for name, mention in (("head", example.head), ("tail", example.tail)):
        if not mention.text:
            v.append(f"{name} mention has empty text")
        if mention.span is not None:
            start, end = mention.span
            if not (0 <= start < end <= len(example.tokens)):
                v.append(f"{name} span ({start},{end}) out of range for "
                         f"{len(example.tokens)} tokens")
            else:
                joined = " ".join(example.tokens[start:end])
                if joined != mention.text:
                    v.append(f"{name} span text mismatch: "
                             f"span joins to '{joined}' but text is '{mention.text}'")
    return report


def _check_or_raise(example: Example, schema: Iterable[str], na_label: str,
                    line: Optional[int]) -> None:
    report = validate_example(example, schema, na_label)
    if not report.ok:
        raise CorpusError(f"invalid example '{example.id}': {report.violations[0]}",
                          line=line)


def _iter_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"not valid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict):
                raise CorpusError("record is not a JSON object", line=lineno)
            yield lineno, record


def _parse_canonical_record(lineno: int, record: dict) -> Example:
    for key in ("id", "tokens", "head", "tail", "relation"):
        if key not in record:
            raise CorpusError("missing required field", line=lineno, field_name=key)
    try:
        return Example.from_dict(record)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"malformed record: {exc}", line=lineno) from exc


def _tacred_mention(record: dict, prefix: str, tokens: tuple[str, ...]) -> Mention:
    start = int(record[f"{prefix}_start"])
    end = int(record[f"{prefix}_end"]) + 1  # TACRED spans are end-inclusive
    text = " ".join(tokens[start:end])
    return Mention(text=text, entity_type=record.get(f"{prefix}_type"), span=(start, end))


def _parse_tacred_record(index: int, record: dict) -> Example:
    for key in ("id", "token", "subj_start", "subj_end", "obj_start", "obj_end",
                "relation"):
        if key not in record:
            raise CorpusError("missing required field", line=index, field_name=key)
    tokens = tuple(_nfc(str(t)) for t in record["token"])
    return Example(
        id=str(record["id"]),
        tokens=tokens,
        head=_tacred_mention(record, "subj", tokens),
        tail=_tacred_mention(record, "obj", tokens),
        relation=_nfc(str(record["relation"])),
    )


def _load_split_file(path: Path, fmt: str) -> list[Example]:
    examples: list[Example] = []
    if fmt == CANONICAL_JSONL:
        for lineno, record in _iter_jsonl(path):
            examples.append(_parse_canonical_record(lineno, record))
    elif fmt == TACRED_JSON:
        with path.open("r", encoding="utf-8") as fh:
            try:
                records = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"not valid JSON: {exc.msg}") from exc
        if not isinstance(records, list):
            raise CorpusError("TACRED file must be a JSON array")
        for i, record in enumerate(records, start=1):
            examples.append(_parse_tacred_record(i, record))
    else:
        raise ValueError(f"unknown corpus format '{fmt}'")
    return examples


_SPLIT_EXTS = {CANONICAL_JSONL: ".jsonl", TACRED_JSON: ".json"}


def load_corpus(path: str | Path, fmt: str = CANONICAL_JSONL,
                split_name: str = "train") -> Corpus:
    """Load a corpus from a single split file or a directory of splits.

    A directory may contain one file per split (train/dev/test plus any
    extra names) and an optional schema.json declaring the relation schema
    and NA label. A single file loads as the split named by ``split_name``.
    Without a declared schema, the schema is inferred from the data in
    first-seen order. All example invariants are checked on load.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")

    declared_schema: Optional[list[str]] = None
    na_label = TACRED_NA_LABEL if fmt == TACRED_JSON else DEFAULT_NA_LABEL

    split_files: list[tuple[str, Path]] = []
    if path.is_dir():
        schema_file = path / "schema.json"
        if schema_file.exists():
            meta = json.loads(schema_file.read_text(encoding="utf-8"))
            declared_schema = [_nfc(str(r)) for r in meta["schema"]]
            na_label = _nfc(str(meta.get("na_label", na_label)))
        ext = _SPLIT_EXTS[fmt]
        for f in sorted(path.glob(f"*{ext}")):
            split_files.append((f.stem, f))
        if not split_files:
            raise CorpusError(f"no {ext} split files in directory {path}")
    else:
        split_files.append((split_name, path))

    splits: dict[str, list[Example]] = {}
    seen_labels: list[str] = []
    for name, f in split_files:
        examples = _load_split_file(f, fmt)
        seen_ids: set[str] = set()
        for ex in examples:
            if ex.id in seen_ids:
                raise CorpusError(f"duplicate example id '{ex.id}' in split '{name}'")
            seen_ids.add(ex.id)
            if ex.relation != na_label and ex.relation not in seen_labels:
                seen_labels.append(ex.relation)
        splits[name] = examples

    schema = declared_schema if declared_schema is not None else seen_labels
    if na_label in schema:
        raise CorpusError(f"NA label '{na_label}' must not appear in the schema")
    corpus = Corpus(schema=schema, na_label=na_label, splits=splits)

    for name, examples in splits.items():
        for i, ex in enumerate(examples):
            _check_or_raise(ex, schema, na_label, line=i + 1)
    return corpus


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    """Write a corpus as a canonical-JSONL directory (with schema.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema_payload = {"schema": corpus.schema, "na_label": corpus.na_label}
    (out / "schema.json").write_text(
        json.dumps(schema_payload, ensure_ascii=False) + "\n", encoding="utf-8")
    for name, examples in corpus.splits.items():
        with (out / f"{name}.jsonl").open("w", encoding="utf-8") as fh:
            for ex in examples:
                fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


@dataclass
class StatsReport:
    """Summary counts for a loaded corpus."""

    split_sizes: dict[str, int]
    relation_count: int
    relation_frequency: dict[str, dict[str, int]]  # split -> relation -> count
    sparse_relations: list[str]  # train relations with < k distinct entity pairs
    k: int

    def to_dict(self) -> dict:
        return {
            "split_sizes": self.split_sizes,
            "relation_count": self.relation_count,
            "relation_frequency": self.relation_frequency,
            "sparse_relations": self.sparse_relations,
            "k": self.k,
        }


def corpus_stats(corpus: Corpus, k: int = 5, train_split: str = "train") -> StatsReport:
    """Per-split sizes, per-relation frequencies, and sparse-relation count."""
    split_sizes = {name: len(exs) for name, exs in corpus.splits.items()}
    freq: dict[str, dict[str, int]] = {}
    for name, exs in corpus.splits.items():
        freq[name] = dict(Counter(ex.relation for ex in exs))

    sparse: list[str] = []
    if train_split in corpus.splits:
        pairs_by_relation: dict[str, set[tuple[str, str]]] = {}
        for ex in corpus.splits[train_split]:
            pairs_by_relation.setdefault(ex.relation, set()).add(
                (ex.head.text, ex.tail.text))
        sparse = [r for r in corpus.schema
                  if len(pairs_by_relation.get(r, ())) < k]
    return StatsReport(
        split_sizes=split_sizes,
        relation_count=len(corpus.schema),
        relation_frequency=freq,
        sparse_relations=sparse,
        k=k,
    )
