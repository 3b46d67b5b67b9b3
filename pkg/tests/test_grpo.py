from __future__ import annotations

import itertools
import math
import random

import numpy as np
import pytest

from conftest import finished_trajectory
from tooljudge.grpo import (
    DegenerateGroup,
    LengthMismatch,
    ObjectiveInputs,
    RolloutGroup,
    TokenSequence,
    attach_advantages,
    clipped_objective,
    export_groups,
    filter_groups,
    group_advantages,
    keep_group,
    kl_penalty,
)
from tooljudge.trajectory import Preference

REWARD_LATTICE = (0.0, 0.1, 1.0)


def brute_force_objective(
    sequences: list[dict],
    advantages: list[float],
    eps_low: float,
    eps_high: float,
    beta: float,
) -> float:
    """Independent plain-Python evaluation of the clipped objective."""
    total = 0.0
    n_tokens = 0
    for seq, adv in zip(sequences, advantages):
        for new, old, ref, trainable in zip(
            seq["new"], seq["old"], seq["ref"], seq["trainable"]
        ):
            if not trainable:
                continue
            ratio = math.exp(new - old)
            clipped = min(max(ratio, 1.0 - eps_low), 1.0 + eps_high)
            surrogate = min(ratio * adv, clipped * adv)
            delta = ref - new
            kl = math.exp(delta) - delta - 1.0
            total += surrogate - beta * kl
            n_tokens += 1
    return total / n_tokens if n_tokens else 0.0


class TestGroupAdvantages:
    def test_hand_case(self):
        # mean 0.5, population std 0.5
        assert group_advantages([1, 1, 0, 0]) == pytest.approx([1, 1, -1, -1])

    def test_arithmetic_oracle(self):
        rewards = [1, 0.1, 0, 0.1]
        mean = sum(rewards) / 4
        std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / 4)
        expected = [(r - mean) / std for r in rewards]
        result = group_advantages(rewards)
        assert result == pytest.approx(expected, abs=1e-12)
        assert sum(result) == pytest.approx(0.0, abs=1e-9)
        assert math.sqrt(sum(a * a for a in result) / 4) == pytest.approx(1.0, abs=1e-9)

    def test_zero_variance(self):
        with pytest.raises(DegenerateGroup):
            group_advantages([1, 1, 1, 1])

    def test_too_small(self):
        with pytest.raises(ValueError):
            group_advantages([1.0])

    def test_normalization_properties(self):
        rng = random.Random(11)
        checked = 0
        while checked < 200:
            size = rng.choice([2, 4, 8])
            rewards = [rng.choice(REWARD_LATTICE) for _ in range(size)]
            if len(set(rewards)) == 1:
                continue
            adv = np.array(group_advantages(rewards))
            assert abs(adv.mean()) < 1e-9
            assert abs(adv.std() - 1.0) < 1e-9
            shifted = group_advantages([r + 5.5 for r in rewards])
            scaled = group_advantages([r * 3.25 for r in rewards])
            assert np.allclose(adv, shifted, atol=1e-9)
            assert np.allclose(adv, scaled, atol=1e-9)
            checked += 1


class TestFilter:
    def test_all_correct_dropped(self):
        assert keep_group([1] * 8) is False

    def test_all_wrong_dropped(self):
        assert keep_group([0] * 8) is False

    def test_mixed_kept(self):
        assert keep_group([1, 0, 0, 0]) is True

    def test_exhaustive_g4(self):
        for pattern in itertools.product((0, 1), repeat=4):
            hits = sum(pattern)
            assert keep_group(pattern) == (0 < hits < 4)

    def test_filter_groups_sets_flags(self):
        groups = [RolloutGroup(task_id=f"t{i}") for i in range(3)]
        flagged = filter_groups(groups, [[1, 1], [1, 0], [0, 0]])
        assert [g.kept for g in flagged] == [False, True, False]
        assert [g.task_id for g in flagged] == ["t0", "t1", "t2"]

    def test_filter_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            filter_groups([RolloutGroup(task_id="t")], [])


class TestKlPenalty:
    def test_identical_policies(self):
        assert kl_penalty([0.5, -1.0], [0.5, -1.0]) == pytest.approx([0.0, 0.0])

    def test_closed_form_ln2(self):
        # delta = ln 2 -> 2 - ln 2 - 1
        value = kl_penalty([-math.log(2)], [0.0])[0]
        assert value == pytest.approx(2 - math.log(2) - 1, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        new = rng.normal(size=500)
        ref = rng.normal(size=500)
        assert (kl_penalty(new, ref) >= 0).all()

    def test_plain_estimator(self):
        assert kl_penalty([1.0], [0.25], estimator="plain")[0] == pytest.approx(0.75)

    def test_shape_mismatch(self):
        with pytest.raises(LengthMismatch):
            kl_penalty([1.0, 2.0], [1.0])


class TestClippedObjective:
    def test_ratio_one_identity(self):
        # logp_new == logp_old, beta 0: objective == token-mean of advantages
        seqs = (
            TokenSequence.build([-1.0, -2.0], [-1.0, -2.0]),
            TokenSequence.build([-0.5], [-0.5]),
        )
        inputs = ObjectiveInputs(sequences=seqs, kl_coeff=0.0)
        advantages = [0.8, -1.6]
        expected = (0.8 * 2 + -1.6 * 1) / 3
        assert clipped_objective(inputs, advantages) == pytest.approx(expected, abs=1e-12)

    def test_single_token_clipped(self):
        # ratio 2.0, advantage +1, eps_high 0.3 -> clipped to 1.3
        seq = TokenSequence.build([math.log(2.0)], [0.0])
        inputs = ObjectiveInputs(sequences=(seq,), eps_low=0.2, eps_high=0.3, kl_coeff=0.0)
        assert clipped_objective(inputs, [1.0]) == pytest.approx(1.3, abs=1e-12)

    def test_masked_positions_inert(self):
        rng = np.random.default_rng(17)
        new = rng.normal(size=5)
        old = rng.normal(size=5)
        ref = rng.normal(size=5)
        trainable = np.array([True, False, True, False, True])
        base = TokenSequence(new, old, ref, trainable)
        # zero the logps at masked positions: result must not change
        zeroed = TokenSequence(
            np.where(trainable, new, 0.0),
            np.where(trainable, old, 0.0),
            np.where(trainable, ref, 0.0),
            trainable,
        )
        inputs_a = ObjectiveInputs(sequences=(base,))
        inputs_b = ObjectiveInputs(sequences=(zeroed,))
        assert clipped_objective(inputs_a, [0.7]) == clipped_objective(inputs_b, [0.7])

    def test_matches_brute_force(self):
        rng = random.Random(23)
        for trial in range(100):
            raw_seqs = []
            advantages = []
            for _ in range(rng.randint(1, 4)):
                length = rng.randint(1, 5)
                raw_seqs.append(
                    {
                        "new": [rng.uniform(-2, 2) for _ in range(length)],
                        "old": [rng.uniform(-2, 2) for _ in range(length)],
                        "ref": [rng.uniform(-2, 2) for _ in range(length)],
                        "trainable": [rng.random() < 0.8 for _ in range(length)],
                    }
                )
                advantages.append(rng.uniform(-2, 2))
            eps_low, eps_high = rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.4)
            beta = rng.choice([0.0, 0.01, 0.1])
            inputs = ObjectiveInputs(
                sequences=tuple(
                    TokenSequence.build(s["new"], s["old"], s["ref"], s["trainable"])
                    for s in raw_seqs
                ),
                eps_low=eps_low,
                eps_high=eps_high,
                kl_coeff=beta,
            )
            expected = brute_force_objective(raw_seqs, advantages, eps_low, eps_high, beta)
            assert clipped_objective(inputs, advantages) == pytest.approx(expected, abs=1e-12)

    def test_length_mismatch(self):
        seq = TokenSequence.build([0.0], [0.0])
        with pytest.raises(LengthMismatch):
            clipped_objective(ObjectiveInputs(sequences=(seq,)), [1.0, 2.0])
        with pytest.raises(LengthMismatch):
            TokenSequence.build([0.0, 1.0], [0.0])

    def test_all_masked_returns_zero(self):
        seq = TokenSequence.build([0.0], [0.0], trainable=[False])
        assert clipped_objective(ObjectiveInputs(sequences=(seq,)), [1.0]) == 0.0


class TestGradientCheck:
    """One-parameter softmax policy over two actions; token = action 0."""

    EPS_LOW, EPS_HIGH = 0.2, 0.3

    @staticmethod
    def _logp(theta: float) -> float:
        return theta - math.log(math.exp(theta) + 1.0)

    def _objective(self, theta: float, theta_old: float, advantage: float) -> float:
        seq = TokenSequence.build([self._logp(theta)], [self._logp(theta_old)])
        inputs = ObjectiveInputs(
            sequences=(seq,), eps_low=self.EPS_LOW, eps_high=self.EPS_HIGH, kl_coeff=0.0
        )
        return clipped_objective(inputs, [advantage])

    def test_unclipped_regime_matches_analytic(self):
        theta, theta_old, advantage = 0.3, 0.25, 1.4
        ratio = math.exp(self._logp(theta) - self._logp(theta_old))
        assert 1 - self.EPS_LOW < ratio < 1 + self.EPS_HIGH
        # d logp / d theta = 1 - softmax0(theta)
        dlogp = 1.0 - math.exp(self._logp(theta))
        analytic = advantage * ratio * dlogp
        h = 1e-6
        fd = (
            self._objective(theta + h, theta_old, advantage)
            - self._objective(theta - h, theta_old, advantage)
        ) / (2 * h)
        assert fd == pytest.approx(analytic, abs=1e-5)

    def test_fully_clipped_regime_flat(self):
        theta, theta_old, advantage = 1.5, 0.0, 1.0
        ratio = math.exp(self._logp(theta) - self._logp(theta_old))
        assert ratio > 1 + self.EPS_HIGH
        h = 1e-6
        fd = (
            self._objective(theta + h, theta_old, advantage)
            - self._objective(theta - h, theta_old, advantage)
        ) / (2 * h)
        assert fd == pytest.approx(0.0, abs=1e-12)


class TestGroups:
    def test_attach_advantages(self):
        group = RolloutGroup(task_id="t", rewards=(1.0, 0.0))
        updated = attach_advantages(group)
        assert updated.advantages == pytest.approx((1.0, -1.0))

    def test_export_kept_groups_only(self):
        traj = finished_trajectory(task_id="t0", prediction=Preference(0), n_calls=1)
        groups = [
            RolloutGroup(
                task_id="t0",
                trajectories=(traj,),
                rewards=(1.0,),
                advantages=(0.5,),
                kept=True,
            ),
            RolloutGroup(task_id="t1", rewards=(0.0,), kept=False),
        ]
        records = list(export_groups(groups))
        assert len(records) == 1
        record = records[0]
        assert record["task_id"] == "t0"
        assert record["rewards"] == [1.0]
        exported = record["trajectories"][0]
        assert "```output" in exported["text"]
        (span,) = exported["mask_spans"]
        assert "```output" in exported["text"][span[0] : span[1]]
