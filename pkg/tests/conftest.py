import random

import pytest

from rexkit.corpus import Corpus, Example, Mention
from rexkit.pair_index import build_index


def make_example(eid, head, tail, relation, tokens=None):
    tokens = tokens if tokens is not None else (eid, head, tail)
    return Example(
        id=eid,
        tokens=tuple(tokens),
        head=Mention(text=head),
        tail=Mention(text=tail),
        relation=relation,
    )


def synthetic_corpus(n_relations=4, pairs_per_relation=6, test_per_relation=2,
                     na_label="NA"):
    """Deterministic corpus: one train example per (relation, pair), unique
    pairs, plus test examples with their own (ungrounded) pairs."""
    schema = [f"rel_{r}" for r in range(n_relations)]
    train, test = [], []
    for r, rel in enumerate(schema):
        for i in range(pairs_per_relation):
            eid = f"train_{r}_{i}"
            train.append(make_example(eid, f"H{r}_{i}", f"T{r}_{i}", rel))
        for i in range(test_per_relation):
            eid = f"test_{r}_{i}"
            test.append(make_example(eid, f"QH{r}_{i}", f"QT{r}_{i}", rel))
    return Corpus(schema=schema, na_label=na_label,
                  splits={"train": train, "test": test})


def random_corpus(rng: random.Random, n_examples, n_relations=5,
                  head_pool=20, tail_pool=20):
    """Random corpus with frequent entity collisions, for retrieval oracles."""
    schema = [f"r{j}" for j in range(n_relations)]
    heads = [f"head {i}" for i in range(head_pool)]
    tails = [f"tail {i}" for i in range(tail_pool)]
    train = []
    for i in range(n_examples):
        train.append(make_example(
            f"e{i}", rng.choice(heads), rng.choice(tails), rng.choice(schema)))
    return Corpus(schema=schema, na_label="NA", splits={"train": train})


def gold_recall_rules(corpus, k, split="test"):
    """Scripted rules answering each test example's recall prompt with k
    grounded gold-relation pairs from the train split."""
    from rexkit.prompting import render_recall_prompt, format_pair_lines
    from rexkit.pair_index import EntityPair
    pairs_by_relation = {}
    for ex in corpus.split("train"):
        pairs_by_relation.setdefault(ex.relation, []).append(
            EntityPair(ex.head.text, ex.tail.text))
    rules = []
    for ex in corpus.split(split):
        pairs = pairs_by_relation[ex.relation][:k]
        rules.append({
            "prompt_equals": render_recall_prompt(ex, k).text,
            "completion": format_pair_lines(pairs),
        })
    return rules


def wrong_relation_recall_rules(corpus, k, split="test"):
    """Recall rules answering with grounded pairs of a different relation."""
    from rexkit.prompting import render_recall_prompt, format_pair_lines
    from rexkit.pair_index import EntityPair
    pairs_by_relation = {}
    for ex in corpus.split("train"):
        pairs_by_relation.setdefault(ex.relation, []).append(
            EntityPair(ex.head.text, ex.tail.text))
    relations = sorted(pairs_by_relation)
    rules = []
    for ex in corpus.split(split):
        other = next(r for r in relations if r != ex.relation)
        rules.append({
            "prompt_equals": render_recall_prompt(ex, k).text,
            "completion": format_pair_lines(pairs_by_relation[other][:k]),
        })
    return rules


def gold_echo_reason_rules(corpus, split="test"):
    """Scripted rules answering each test example's reason prompt with the
    gold label (matched on the unique unfilled query block)."""
    from rexkit.prompting import DEFAULT_TEMPLATES
    rules = []
    for ex in corpus.split(split):
        marker = DEFAULT_TEMPLATES.query.format(
            sentence=ex.sentence, head=ex.head.text, tail=ex.tail.text)
        rules.append({"prompt_contains": marker,
                      "completion": f" {ex.relation}"})
    return rules


@pytest.fixture
def small_corpus():
    return synthetic_corpus()


@pytest.fixture
def small_index(small_corpus):
    return build_index(small_corpus, "train")
