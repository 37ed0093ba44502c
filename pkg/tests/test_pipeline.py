import random
from collections import Counter

import pytest

from rexkit.backend import ScriptedBackend
from rexkit.corpus import Corpus
from rexkit.pair_index import EntityPair, build_index, pair_key
from rexkit.pipeline import (FALLBACK_FAIL, FALLBACK_NA, MODE_ICL,
                             MODE_MAJORITY, MODE_MARGINAL, PipelineError,
                             RecallResult, RunAborted, audit_validness,
                             majority_vote, recall_pairs, run_example,
                             run_split)
from rexkit.prompting import render_recall_prompt

from conftest import (gold_echo_reason_rules, gold_recall_rules,
                      make_example, synthetic_corpus)


def recall_result(pairs, eid="t"):
    return RecallResult(example_id=eid, raw_output="", pairs=pairs,
                        parse_issues=[])


class TestRecallPairs:
    def test_well_formed_lines(self, small_corpus):
        ex = small_corpus.split("test")[0]
        backend = ScriptedBackend.from_spec({"rules": [{
            "prompt_equals": render_recall_prompt(ex, 5).text,
            "completion": "\n".join(f"H{i} | T{i}" for i in range(5)),
        }]})
        result = recall_pairs(backend, ex, 5)
        assert len(result.pairs) == 5
        assert result.parse_issues == []
        assert result.raw_output.startswith("H0 | T0")

    def test_partial_parse_recovery(self, small_corpus):
        ex = small_corpus.split("test")[0]
        backend = ScriptedBackend.from_spec({"rules": [{
            "prompt_equals": render_recall_prompt(ex, 5).text,
            "completion": "A | B\nbroken line\nC | D\nE | F\nalso broken",
        }]})
        result = recall_pairs(backend, ex, 5)
        assert len(result.pairs) == 3
        assert len(result.parse_issues) == 2


class TestAuditValidness:
    def test_all_grounded(self, small_index):
        pairs = [EntityPair("H0_0", "T0_0")] * 5
        buckets = audit_validness(recall_result(pairs), small_index)
        assert buckets.pair_grounded == 5
        assert buckets.total == 5

    def test_entities_grounded_pair_not(self, small_index):
        # both entities exist in the corpus but never together
        buckets = audit_validness(
            recall_result([EntityPair("H0_0", "T1_1")]), small_index)
        assert buckets.entities_grounded_pair_not == 1

    def test_one_entity_grounded(self, small_index):
        buckets = audit_validness(
            recall_result([EntityPair("H0_0", "nothing")]), small_index)
        assert buckets.one_entity_grounded == 1

    def test_ungrounded(self, small_index):
        buckets = audit_validness(
            recall_result([EntityPair("xx", "yy")]), small_index)
        assert buckets.ungrounded == 1

    def test_matches_brute_force_classifier(self, small_corpus, small_index):
        rng = random.Random(5)
        surfaces = (["H0_0", "T0_0", "H1_2", "T2_3", "zzz", "H3_1", "T1_4"])
        train = small_corpus.split("train")
        train_keys = {pair_key(EntityPair(e.head.text, e.tail.text),
                               small_index.norm_config) for e in train}
        heads = {k[0] for k in train_keys}
        tails = {k[1] for k in train_keys}
        for _ in range(200):
            pair = EntityPair(rng.choice(surfaces), rng.choice(surfaces))
            buckets = audit_validness(recall_result([pair]), small_index)
            key = pair_key(pair, small_index.norm_config)
            if key in train_keys:
                expected = "pair_grounded"
            elif key[0] in heads and key[1] in tails:
                expected = "entities_grounded_pair_not"
            elif key[0] in heads or key[1] in tails:
                expected = "one_entity_grounded"
            else:
                expected = "ungrounded"
            assert getattr(buckets, expected) == 1, (pair, expected)


class TestMajorityVote:
    def test_plain_majority(self):
        assert majority_vote(["A", "A", "B", "C", "A"]) == "A"

    def test_tie_breaks_first_seen(self):
        assert majority_vote(["A", "A", "B", "B", "C"]) == "A"
        assert majority_vote(["B", "A", "A", "B", "C"]) == "B"

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([])

    def test_matches_count_then_first_seen_oracle(self):
        rng = random.Random(9)
        labels = ["A", "B", "C", "D"]
        for _ in range(300):
            votes = [rng.choice(labels) for _ in range(rng.randint(1, 9))]
            counts = Counter(votes)
            top = max(counts.values())
            expected = next(v for v in votes if counts[v] == top)
            assert majority_vote(votes) == expected


@pytest.fixture
def oracle_backend(small_corpus):
    rules = gold_recall_rules(small_corpus, 5) + \
        gold_echo_reason_rules(small_corpus)
    return ScriptedBackend.from_spec({"rules": rules})


class TestRunExample:
    def test_majority_vote_gold(self, small_corpus, small_index,
                                oracle_backend):
        ex = small_corpus.split("test")[0]
        record = run_example(oracle_backend, small_index, ex,
                             small_corpus.schema, small_corpus.na_label,
                             mode=MODE_MAJORITY, k=5)
        assert record.predicted == ex.relation
        assert len(record.demonstrations) == 5
        assert record.validness.pair_grounded == 5
        assert not record.empty_retrieval
        assert set(record.timing) == {"recall_s", "audit_s", "retrieve_s",
                                      "predict_s"}

    def test_icl_gold_echo(self, small_corpus, small_index, oracle_backend):
        ex = small_corpus.split("test")[1]
        record = run_example(oracle_backend, small_index, ex,
                             small_corpus.schema, small_corpus.na_label,
                             mode=MODE_ICL, k=5)
        assert record.predicted == ex.relation
        assert record.parse_ok

    def test_marginal_mode(self, small_corpus, small_index, oracle_backend):
        backend = ScriptedBackend.from_spec({
            "rules": gold_recall_rules(small_corpus, 5), "vocab_size": 4})
        ex = small_corpus.split("test")[0]
        record = run_example(backend, small_index, ex, small_corpus.schema,
                             small_corpus.na_label, mode=MODE_MARGINAL, k=5)
        # uniform scorer: every label ties, argmax falls to schema order
        assert record.predicted == small_corpus.schema[0]

    def test_zero_demo_fallback_zero_shot(self, small_corpus, small_index):
        ex = small_corpus.split("test")[0]
        rules = [{"prompt_equals": render_recall_prompt(ex, 5).text,
                  "completion": "nope | nada"}] + \
            gold_echo_reason_rules(small_corpus)
        backend = ScriptedBackend.from_spec({"rules": rules})
        record = run_example(backend, small_index, ex, small_corpus.schema,
                             small_corpus.na_label, mode=MODE_ICL, k=5)
        assert record.empty_retrieval
        assert record.predicted == ex.relation  # zero-shot gold echo

    def test_zero_demo_fallback_na(self, small_corpus, small_index):
        ex = small_corpus.split("test")[0]
        backend = ScriptedBackend.from_spec({"rules": [
            {"prompt_equals": render_recall_prompt(ex, 5).text,
             "completion": "nope | nada"}]})
        record = run_example(backend, small_index, ex, small_corpus.schema,
                             small_corpus.na_label, mode=MODE_MAJORITY, k=5,
                             fallback_policy=FALLBACK_NA)
        assert record.predicted == small_corpus.na_label

    def test_zero_demo_fallback_fail(self, small_corpus, small_index):
        ex = small_corpus.split("test")[0]
        backend = ScriptedBackend.from_spec({"rules": [
            {"prompt_equals": render_recall_prompt(ex, 5).text,
             "completion": "nope | nada"}]})
        with pytest.raises(PipelineError):
            run_example(backend, small_index, ex, small_corpus.schema,
                        small_corpus.na_label, mode=MODE_MAJORITY, k=5,
                        fallback_policy=FALLBACK_FAIL)

    def test_duplicate_pairs_deduplicate(self, small_corpus, small_index):
        ex = small_corpus.split("test")[0]
        backend = ScriptedBackend.from_spec({"rules": [
            {"prompt_equals": render_recall_prompt(ex, 5).text,
             "completion": "H0_0 | T0_0\nH0_0 | T0_0\nH0_1 | T0_1"}]})
        record = run_example(backend, small_index, ex, small_corpus.schema,
                             small_corpus.na_label, mode=MODE_MAJORITY, k=5)
        assert record.demonstrations == ["train_0_0", "train_0_1"]
        assert record.duplicate_pairs == 1

    def test_demonstrations_subset_of_grounded(self, small_corpus,
                                               small_index, oracle_backend):
        for ex in small_corpus.split("test"):
            record = run_example(oracle_backend, small_index, ex,
                                 small_corpus.schema, small_corpus.na_label,
                                 mode=MODE_MAJORITY, k=5)
            assert len(record.demonstrations) <= \
                record.validness.pair_grounded <= 5

    def test_external_demonstrations_override(self, small_corpus,
                                              small_index, oracle_backend):
        ex = small_corpus.split("test")[0]
        record = run_example(oracle_backend, small_index, ex,
                             small_corpus.schema, small_corpus.na_label,
                             mode=MODE_MAJORITY, k=5,
                             demonstrations_override=["train_2_0",
                                                      "train_2_1"])
        assert record.predicted == "rel_2"
        assert record.demonstrations == ["train_2_0", "train_2_1"]

    def test_round_trip_serialization(self, small_corpus, small_index,
                                      oracle_backend):
        ex = small_corpus.split("test")[0]
        record = run_example(oracle_backend, small_index, ex,
                             small_corpus.schema, small_corpus.na_label,
                             mode=MODE_MAJORITY, k=5)
        from rexkit.pipeline import PredictionRecord
        assert PredictionRecord.from_dict(record.to_dict()) == record


class TestRunSplit:
    def test_order_and_parallelism_determinism(self, small_corpus,
                                               small_index, oracle_backend):
        runs = []
        for parallelism in (1, 4):
            records = list(run_split(oracle_backend, small_index,
                                     small_corpus, split="test",
                                     mode=MODE_MAJORITY, k=5,
                                     parallelism=parallelism))
            ids = [r.example_id for r in records]
            assert ids == [e.id for e in small_corpus.split("test")]
            runs.append([{**r.to_dict(), "timing": None} for r in records])
        assert runs[0] == runs[1]

    def test_abort_after_consecutive_failures(self, small_corpus,
                                              small_index):
        # rules only for the first 3 test examples, then permanent misses
        rules = gold_recall_rules(small_corpus, 5)[:3]
        backend = ScriptedBackend.from_spec({"rules": rules})
        records = []
        with pytest.raises(RunAborted) as err:
            for r in run_split(backend, small_index, small_corpus,
                               split="test", mode=MODE_MAJORITY, k=5,
                               failure_threshold=1):
                records.append(r)
        assert len(records) == 3
        assert err.value.completed == 3

    def test_failures_below_threshold_skip(self, small_corpus, small_index):
        rules = gold_recall_rules(small_corpus, 5)
        del rules[2]
        backend = ScriptedBackend.from_spec({"rules": rules})
        records = list(run_split(backend, small_index, small_corpus,
                                 split="test", mode=MODE_MAJORITY, k=5,
                                 failure_threshold=2))
        assert len(records) == len(small_corpus.split("test")) - 1
