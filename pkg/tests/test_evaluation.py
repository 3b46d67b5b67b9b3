from __future__ import annotations

import itertools
import random

import pytest

from conftest import ConstantJudge, OracleJudge
from tooljudge.evaluation import (
    EvalReport,
    PreferencePair,
    best_of_n_knockout,
    best_of_n_pointwise,
    eval_listwise,
    eval_pairwise,
    eval_pointwise,
    majority_vote,
)
from tooljudge.pipeline import build_listwise_item, ExactMatchVerifier
from tooljudge.trajectory import (
    JudgeTask,
    Prediction,
    Preference,
    Score,
    TaskKind,
)


def make_pairs(count: int = 12) -> list[PreferencePair]:
    return [
        PreferencePair(id=f"p{i}", prompt=f"question {i}", chosen="good", rejected="bad")
        for i in range(count)
    ]


def make_listwise_items(count: int = 8, n: int = 4) -> list[JudgeTask]:
    items = []
    for i in range(count):
        gold = i % n
        pool = [f"wrong {j}" for j in range(9)]
        task = build_listwise_item(
            f"q{i}", "right 5", pool, ExactMatchVerifier("5"), seed=i, item_id=f"lw{i}"
        )
        items.append(task)
    return items


class FixedScoresJudge:
    """Returns queued scores for successive pointwise calls."""

    def __init__(self, scores: list[int | None]):
        self.scores = list(scores)

    def judge(self, task: JudgeTask) -> Prediction | None:
        value = self.scores.pop(0)
        return Score(value) if value is not None else None


class TestEvalPointwise:
    def test_oracle_scores_one(self):
        report = eval_pointwise(OracleJudge(), make_pairs())
        assert report.accuracy == 1.0
        assert report.abstentions == 0

    @pytest.mark.parametrize(
        "scores,credit",
        [((8, 5), 1.0), ((6, 6), 0.5), ((4, 9), 0.0)],
    )
    def test_credit_rules(self, scores, credit):
        judge = FixedScoresJudge(list(scores))
        report = eval_pointwise(judge, make_pairs(1))
        assert report.accuracy == credit
        assert report.items[0]["credit"] == credit

    def test_abstention_zero_and_tallied(self):
        judge = FixedScoresJudge([None, 7])
        report = eval_pointwise(judge, make_pairs(1))
        assert report.accuracy == 0.0
        assert report.abstentions == 1
        assert report.items[0]["abstained"] is True

    def test_report_recomputes_accuracy(self):
        judge = FixedScoresJudge([8, 5, 6, 6, 4, 9])
        report = eval_pointwise(judge, make_pairs(3))
        assert report.accuracy == pytest.approx(
            sum(item["credit"] for item in report.items) / 3
        )


class TestEvalPairwise:
    def test_oracle_scores_one(self):
        report = eval_pairwise(OracleJudge(), make_pairs(), seed=5)
        assert report.accuracy == 1.0

    def test_constant_a_matches_seeded_ordering(self):
        pairs = make_pairs(40)
        seed = 123
        # enumerate the seeded orderings independently and count slot-A hits
        rng = random.Random(seed)
        expected_hits = sum(1 for _ in pairs if rng.randrange(2) == 0)
        report = eval_pairwise(ConstantJudge(Preference(0)), pairs, seed=seed)
        assert report.accuracy == pytest.approx(expected_hits / len(pairs))
        assert 0.2 < report.accuracy < 0.8  # balanced-ish ordering

    def test_same_seed_identical(self):
        pairs = make_pairs(20)
        first = eval_pairwise(OracleJudge(), pairs, seed=9)
        second = eval_pairwise(OracleJudge(), pairs, seed=9)
        assert first.items == second.items
        assert [i["chosen_position"] for i in first.items] == [
            i["chosen_position"] for i in second.items
        ]

    def test_ordering_logged(self):
        report = eval_pairwise(OracleJudge(), make_pairs(5), seed=1)
        assert all(item["chosen_position"] in (0, 1) for item in report.items)

    def test_abstention_counts_zero(self):
        report = eval_pairwise(ConstantJudge(None), make_pairs(4), seed=0)
        assert report.accuracy == 0.0
        assert report.abstentions == 4

    def test_item_permutation_invariance(self):
        pairs = make_pairs(16)
        base = eval_pairwise(OracleJudge(), pairs, seed=3).accuracy
        shuffled = list(pairs)
        random.Random(0).shuffle(shuffled)
        assert eval_pairwise(OracleJudge(), shuffled, seed=3).accuracy == base


class TestEvalListwise:
    def test_oracle_scores_one(self):
        report = eval_listwise(OracleJudge(), make_listwise_items())
        assert report.accuracy == 1.0

    def test_uniform_random_judge_near_chance(self):
        rng = random.Random(77)

        class RandomJudge:
            def judge(self, task):
                return Preference(rng.randrange(task.n_candidates))

        # fixed-n items: best-of-4 chance is 1/4; 3 sigma binomial bound
        items = []
        attempt = 0
        while len(items) < 400:
            task = build_listwise_item(
                f"q{attempt}",
                "right 5",
                [f"wrong {j}" for j in range(9)],
                ExactMatchVerifier("5"),
                seed=attempt,
                item_id=f"r{attempt}",
            )
            attempt += 1
            if task.n_candidates == 4:
                items.append(task)
        report = eval_listwise(RandomJudge(), items)
        n = len(items)
        sigma = (0.25 * 0.75 / n) ** 0.5
        assert abs(report.accuracy - 0.25) < 3 * sigma

    def test_single_item_wrong(self):
        items = make_listwise_items(1)
        wrong = (items[0].gold.preferred_index + 1) % items[0].n_candidates
        report = eval_listwise(ConstantJudge(Preference(wrong)), items)
        assert report.accuracy == 0.0

    def test_rejects_unlabelled(self):
        task = make_listwise_items(1)[0]
        unlabelled = JudgeTask(
            id="x",
            prompt=task.prompt,
            candidates=task.candidates,
            kind=TaskKind.LISTWISE,
            domain=task.domain,
        )
        with pytest.raises(ValueError):
            eval_listwise(OracleJudge(), [unlabelled])


class TestKnockout:
    def test_single_response_no_calls(self):
        judge = OracleJudge()
        outcome = best_of_n_knockout(judge, "q", ["only"])
        assert outcome.winner == 0
        assert outcome.judge_calls == 0
        assert judge.calls == 0

    def test_exactly_n_minus_one_calls(self):
        for n in range(1, 8):
            judge = OracleJudge()
            responses = [f"resp quality={i}" for i in range(n)]
            outcome = best_of_n_knockout(judge, "q", responses)
            assert outcome.judge_calls == n - 1
            assert judge.calls == n - 1

    def test_transitive_oracle_wins_any_order(self):
        for n in range(2, 6):
            qualities = list(range(1, n + 1))
            for perm in itertools.permutations(qualities):
                responses = [f"answer quality={q}" for q in perm]
                outcome = best_of_n_knockout(OracleJudge(), "q", responses)
                assert perm[outcome.winner] == max(qualities)

    def test_abstention_retains_champion(self):
        outcome = best_of_n_knockout(ConstantJudge(None), "q", ["a", "b", "c"])
        assert outcome.winner == 0
        assert outcome.abstentions == 2

    def test_comparison_log_replayable(self):
        responses = [f"r quality={q}" for q in (2, 9, 4)]
        outcome = best_of_n_knockout(OracleJudge(), "q", responses)
        champion = 0
        for entry in outcome.comparisons:
            assert entry["champion"] == champion
            champion = entry["winner"]
        assert champion == outcome.winner


class TestBestOfNPointwise:
    def test_unique_max(self):
        judge = FixedScoresJudge([3, 9, 5])
        outcome = best_of_n_pointwise(judge, "q", ["it is 1", "it is 2", "it is 3"])
        assert outcome.answer == "2"
        assert outcome.top_indices == [1]

    def test_majority_among_tied_max(self):
        judge = FixedScoresJudge([9, 9, 9])
        outcome = best_of_n_pointwise(judge, "q", ["sum is 42", "i got 42", "maybe 7"])
        assert outcome.answer == "42"

    def test_all_equal_plain_majority(self):
        judge = FixedScoresJudge([5, 5, 5, 5])
        outcome = best_of_n_pointwise(judge, "q", ["a 1", "b 2", "c 1", "d 3"])
        assert outcome.answer == "1"

    def test_abstentions_excluded_from_top(self):
        judge = FixedScoresJudge([None, 4, None])
        outcome = best_of_n_pointwise(judge, "q", ["x 9", "y 8", "z 7"])
        assert outcome.top_indices == [1]
        assert outcome.answer == "8"


class TestMajorityVote:
    def test_examples(self):
        assert majority_vote(["a", "b", "a"]) == "a"
        assert majority_vote(["a"]) == "a"
        assert majority_vote(["a", "b"]) == "a"

    def test_normalized_grouping(self):
        from tooljudge.pipeline import normalize_answer

        answers = ["The answer is 42.", "42", "7"]
        assert majority_vote(answers, normalize=normalize_answer) == "The answer is 42."

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([])


class TestReports:
    def test_json_round_trip(self):
        report = eval_pairwise(OracleJudge(), make_pairs(3), seed=2)
        import json

        data = json.loads(report.to_json())
        assert data["protocol"] == "pairwise"
        assert data["n_items"] == 3
        assert len(data["items"]) == 3

    def test_empty_report(self):
        report = eval_pointwise(OracleJudge(), [])
        assert isinstance(report, EvalReport)
        assert report.accuracy == 0.0
