import math
import random

import pytest

from rexkit.backend import ScriptedBackend, tokenize_text
from rexkit.objectives import (JOINT_CONTEXT, LITERAL_SUM, joint_loss,
                               logsumexp, marginal_relation_scores,
                               gold_continuation, reason_loss, recall_loss)
from rexkit.pair_index import EntityPair
from rexkit.prompting import (format_pair_line, render_reason_prompt,
                              render_recall_prompt)

from conftest import make_example


@pytest.fixture
def example():
    return make_example("e1", "Acme", "Bob", "employer")


def uniform(v):
    return ScriptedBackend.from_spec({"vocab_size": v})


class TestRecallLoss:
    def test_uniform_analytic(self, example):
        # loss = mean token count times ln V
        pairs = [EntityPair("A", "B"), EntityPair("CD", "E")]
        counts = [len(tokenize_text(format_pair_line(p))) for p in pairs]
        assert counts == [3, 3]
        result = recall_loss(uniform(4), example, pairs)
        expected = math.log(4) * sum(counts) / len(counts)
        assert result.loss == pytest.approx(expected, abs=1e-12)

    def test_scripted_single_pair(self, example):
        pair = EntityPair("A", "B")
        backend = ScriptedBackend.from_spec({"rules": [{
            "prompt_contains": "Acme",
            "completion": format_pair_line(pair),
            "logprobs": [-0.1, -0.2],
            "tokens": ["A |", " B"],
        }]})
        result = recall_loss(backend, example, [pair])
        assert result.loss == pytest.approx(0.3, abs=1e-12)
        assert result.per_pair_logprobs[0][1] == pytest.approx(-0.3)

    def test_empty_pairs_rejected(self, example):
        with pytest.raises(ValueError):
            recall_loss(uniform(4), example, [])

    def test_duplication_invariance(self, example):
        # mean over pairs: duplicating the pair set leaves the loss unchanged
        pairs = [EntityPair("A", "B"), EntityPair("C", "D")]
        a = recall_loss(uniform(8), example, pairs).loss
        b = recall_loss(uniform(8), example, pairs + pairs).loss
        assert a == pytest.approx(b, abs=1e-12)

    def test_table_rewalk_oracle(self, example):
        rng = random.Random(11)
        pairs = [EntityPair(f"H{i}", f"T{i}") for i in range(4)]
        prompt = render_recall_prompt(example, k=len(pairs)).text
        rules, table = [], {}
        for pair in pairs:
            line = format_pair_line(pair)
            lps = [round(-rng.random(), 6)
                   for _ in tokenize_text(line)]
            rules.append({"prompt_equals": prompt, "completion": line,
                          "logprobs": lps})
            table[line] = lps
        backend = ScriptedBackend.from_spec({"rules": rules})
        result = recall_loss(backend, example, pairs)
        expected = -math.fsum(
            math.fsum(table[format_pair_line(p)]) for p in pairs) / len(pairs)
        assert result.loss == pytest.approx(expected, abs=1e-12)


class TestReasonLoss:
    def test_joint_context_uniform(self, example):
        demos = [make_example("d1", "H", "T", "employer")]
        gold = "located in"  # 2 pieces
        loss = reason_loss(uniform(4), example, demos, gold,
                           mode=JOINT_CONTEXT)
        assert loss == pytest.approx(2 * math.log(4), abs=1e-12)

    def test_literal_sum_two_demos(self, example):
        demos = [make_example("d1", "H1", "T1", "r"),
                 make_example("d2", "H2", "T2", "r")]
        rules = []
        for demo in demos:
            prompt = render_reason_prompt(example, [demo]).text
            rules.append({"prompt_equals": prompt,
                          "continuation_equals": gold_continuation("r"),
                          "logprobs": [-1.0], "tokens": [" r"]})
        backend = ScriptedBackend.from_spec({"rules": rules})
        loss = reason_loss(backend, example, demos, "r", mode=LITERAL_SUM)
        assert loss == pytest.approx(1 - math.log(2), abs=1e-12)

    def test_empty_demos_rejected(self, example):
        with pytest.raises(ValueError):
            reason_loss(uniform(4), example, [], "r")

    def test_unknown_mode_rejected(self, example):
        with pytest.raises(ValueError):
            reason_loss(uniform(4), example,
                        [make_example("d", "H", "T", "r")], "r", mode="bogus")

    def test_both_modes_vs_naive_oracle(self, example):
        rng = random.Random(23)
        for _ in range(20):
            demos = [make_example(f"d{i}", f"H{i}", f"T{i}", "r")
                     for i in range(rng.randint(1, 4))]
            gold = "some relation"
            cont = gold_continuation(gold)
            n_tokens = len(tokenize_text(cont))
            rules, seq_lps = [], []
            for demo in demos:
                prompt = render_reason_prompt(example, [demo]).text
                lps = [round(-3 * rng.random(), 6) for _ in range(n_tokens)]
                rules.append({"prompt_equals": prompt,
                              "continuation_equals": cont, "logprobs": lps})
                seq_lps.append(math.fsum(lps))
            joint_prompt = render_reason_prompt(example, demos).text
            joint_lps = [round(-3 * rng.random(), 6) for _ in range(n_tokens)]
            if len(demos) == 1:
                # the joint prompt collides with the single-demo prompt and
                # the earlier rule wins
                joint_lps = list(rules[0]["logprobs"])
            else:
                rules.append({"prompt_equals": joint_prompt,
                              "continuation_equals": cont,
                              "logprobs": joint_lps})
            backend = ScriptedBackend.from_spec({"rules": rules})
            # naive oracle, no log-sum-exp
            naive_literal = -math.log(sum(math.exp(v) for v in seq_lps))
            assert reason_loss(backend, example, demos, gold,
                               mode=LITERAL_SUM) == \
                pytest.approx(naive_literal, abs=1e-9)
            assert reason_loss(backend, example, demos, gold,
                               mode=JOINT_CONTEXT) == \
                pytest.approx(-math.fsum(joint_lps), abs=1e-12)


class TestJointLoss:
    def test_additivity(self, example):
        pairs = [EntityPair("A", "B")]
        demos = [make_example("d", "H", "T", "r")]
        breakdown = joint_loss(uniform(4), example, pairs, demos, "r")
        assert breakdown.joint_loss == pytest.approx(
            breakdown.recall_loss + breakdown.reason_loss, abs=1e-12)

    def test_empty_demos_propagates(self, example):
        with pytest.raises(ValueError):
            joint_loss(uniform(4), example, [EntityPair("A", "B")], [], "r")

    def test_components_match_independent_calls(self, example):
        pairs = [EntityPair("A", "B"), EntityPair("C", "D")]
        demos = [make_example("d", "H", "T", "r")]
        backend = uniform(6)
        breakdown = joint_loss(backend, example, pairs, demos, "r")
        assert breakdown.recall_loss == pytest.approx(
            recall_loss(backend, example, pairs).loss, abs=1e-12)
        assert breakdown.reason_loss == pytest.approx(
            reason_loss(backend, example, demos, "r"), abs=1e-12)

    def test_report_line_fields(self, example):
        breakdown = joint_loss(uniform(4), example, [EntityPair("A", "B")],
                               [make_example("d", "H", "T", "r")], "r")
        line = breakdown.report_line("e1")
        assert set(line) == {"example_id", "recall_loss", "reason_loss",
                             "joint_loss", "mode", "per_pair"}


class TestMarginalScores:
    def test_hand_computed_mixture(self, example):
        # priors renormalize to 0.6/0.4; conditionals 1.0 vs 0.5 on r1
        demos = [make_example("d1", "H1", "T1", "r1"),
                 make_example("d2", "H2", "T2", "r1")]
        labels = ["r1", "r2"]
        rules = []
        p1 = render_reason_prompt(example, [demos[0]]).text
        p2 = render_reason_prompt(example, [demos[1]]).text
        # demo1: p(r1)=2/3, p(r2)=1/3 -> after schema renorm
        rules.append({"prompt_equals": p1, "continuation_equals": " r1",
                      "logprobs": [math.log(0.5)]})
        rules.append({"prompt_equals": p1, "continuation_equals": " r2",
                      "logprobs": [math.log(0.25)]})
        # demo2: equal mass
        rules.append({"prompt_equals": p2, "continuation_equals": " r1",
                      "logprobs": [math.log(0.3)]})
        rules.append({"prompt_equals": p2, "continuation_equals": " r2",
                      "logprobs": [math.log(0.3)]})
        backend = ScriptedBackend.from_spec({"rules": rules})
        w = math.log(0.6)  # any common rescale cancels in softmax
        dist = marginal_relation_scores(
            backend, example,
            [(demos[0], w + math.log(0.6)), (demos[1], w + math.log(0.4))],
            labels)
        expected_r1 = 0.6 * (2 / 3) + 0.4 * 0.5
        assert dist.scores["r1"] == pytest.approx(expected_r1, abs=1e-9)
        assert sum(dist.scores.values()) == pytest.approx(1.0, abs=1e-9)

    def test_single_demo_degenerate(self, example):
        demo = make_example("d1", "H1", "T1", "r1")
        prompt = render_reason_prompt(example, [demo]).text
        rules = [
            {"prompt_equals": prompt, "continuation_equals": " r1",
             "logprobs": [math.log(0.9)]},
            {"prompt_equals": prompt, "continuation_equals": " r2",
             "logprobs": [math.log(0.1)]},
        ]
        backend = ScriptedBackend.from_spec({"rules": rules})
        dist = marginal_relation_scores(backend, example, [(demo, -2.0)],
                                        ["r1", "r2"])
        assert dist.scores["r1"] == pytest.approx(0.9, abs=1e-9)

    def test_uniform_backend_uniform_distribution(self, example):
        demos = [(make_example("d1", "H", "T", "r1"), -1.0)]
        labels = ["r1", "r2", "r3"]
        dist = marginal_relation_scores(uniform(4), example, demos, labels)
        for label in labels:
            assert dist.scores[label] == pytest.approx(1 / 3, abs=1e-9)

    def test_prior_rescale_invariance(self, example):
        demos = [make_example("d1", "H1", "T1", "r1"),
                 make_example("d2", "H2", "T2", "r2")]
        backend = uniform(5)
        base = [(demos[0], -1.0), (demos[1], -2.5)]
        shifted = [(demos[0], -1.0 + 7.0), (demos[1], -2.5 + 7.0)]
        a = marginal_relation_scores(backend, example, base, ["r1", "r2"])
        b = marginal_relation_scores(backend, example, shifted, ["r1", "r2"])
        for label in a.scores:
            assert a.scores[label] == pytest.approx(b.scores[label], abs=1e-12)

    def test_empty_labels_rejected(self, example):
        with pytest.raises(ValueError):
            marginal_relation_scores(
                uniform(4), example,
                [(make_example("d", "H", "T", "r"), -1.0)], [])


class TestLogSumExp:
    def test_matches_naive(self):
        vals = [-1.0, -2.0, -0.5]
        assert logsumexp(vals) == pytest.approx(
            math.log(sum(math.exp(v) for v in vals)), abs=1e-12)

    def test_underflow_safe(self):
        assert logsumexp([-1000.0, -1001.0]) == pytest.approx(
            -1000.0 + math.log(1 + math.exp(-1.0)), abs=1e-9)
