import math
import unittest
import numpy as np
from scipy.special import log_softmax
from bppo.base.exceptions import ConfigurationException
from bppo.objective import (
    BinaryPair, GroupSkipped, KLMode, ObjectiveConfig, PrefixSpec, SelectionStrategy,
    batch_gradients, bppo_loss, group_loss_and_gradients, grpo_loss, make_prefix_mask,
    select_binary, select_full_group, select_indices, surrogate_loss, token_kl
)
from bppo.policy import Trajectory, forward_logits
from bppo.rollout import make_group
from bppo.tasks import vocab
from tests.fixtures import forced_group, tiny_params

PROMPT = tuple(vocab.encode("<bos> 3 + 4 ="))


def manual_group(responses, rewards, logprob=-1.0):
    """A group of hand-written responses with constant behavior log-probs."""

    trajectories = [
        Trajectory(PROMPT, tuple(r), tuple([logprob] * len(r)))
        for r in responses
    ]
    return make_group(0, PROMPT, trajectories, rewards)


class TestPrefixSpec(unittest.TestCase):

    def test_counts(self):

        self.assertEqual(PrefixSpec.fraction(0.5).n_tokens(5), 3)
        self.assertEqual(PrefixSpec.fraction(0.3).n_tokens(10), 3)
        self.assertEqual(PrefixSpec.fraction(1.0).n_tokens(7), 7)
        self.assertEqual(PrefixSpec.fraction(0.01).n_tokens(3), 1)
        self.assertEqual(PrefixSpec.absolute(4).n_tokens(2), 2)
        self.assertEqual(PrefixSpec.absolute(4).n_tokens(9), 4)

    def test_parse(self):

        self.assertEqual(PrefixSpec.parse("abs:4"), PrefixSpec.absolute(4))
        self.assertEqual(PrefixSpec.parse("frac:0.25"), PrefixSpec.fraction(0.25))
        self.assertEqual(str(PrefixSpec.parse("abs:2")), "abs:2")

    def test_invalid(self):

        self.assertRaises(ConfigurationException, lambda: PrefixSpec.parse("half"))
        self.assertRaises(ConfigurationException, lambda: PrefixSpec.parse("frac:0"))
        self.assertRaises(ConfigurationException, lambda: PrefixSpec.parse("frac:1.5"))
        self.assertRaises(ConfigurationException, lambda: PrefixSpec.parse("abs:0"))
        self.assertRaises(ConfigurationException, lambda: PrefixSpec.parse("abs:1.5"))
        self.assertRaises(ConfigurationException, lambda: PrefixSpec.parse("rel:1"))

    def test_mask(self):

        self.assertEqual(list(make_prefix_mask(4, PrefixSpec.absolute(2))), [1.0, 1.0, 0.0, 0.0])
        self.assertRaises(ValueError, lambda: make_prefix_mask(0, PrefixSpec()))


class TestObjectiveConfig(unittest.TestCase):

    def test_invalid(self):

        self.assertRaises(ConfigurationException, lambda: ObjectiveConfig(epsilon=0.0))
        self.assertRaises(ConfigurationException, lambda: ObjectiveConfig(epsilon=1.0))
        self.assertRaises(ConfigurationException, lambda: ObjectiveConfig(beta=-0.1))
        self.assertRaises(ConfigurationException, lambda: ObjectiveConfig(selection="Best"))
        self.assertRaises(ConfigurationException, lambda: ObjectiveConfig(kl_mode="K2"))

    def test_dict(self):

        cfg = ObjectiveConfig(prefix="abs:3", selection="MedianLength", kl_mode="K3Estimator")
        self.assertEqual(ObjectiveConfig.from_dict(cfg.to_dict()), cfg)


class TestSelection(unittest.TestCase):

    def test_empty_stratum_skips(self):

        group = manual_group([[1, 2], [3], [4]], [1.0, 1.0, 1.0])
        skipped = select_binary(group)

        self.assertIsInstance(skipped, GroupSkipped)
        self.assertIn("negative", skipped.reason)
        self.assertIsInstance(select_binary(manual_group([[1], [2]], [0.0, 0.0])), GroupSkipped)

    def test_random_is_seeded(self):

        group = manual_group([[1], [2], [3], [4], [5], [6]], [1.0, 0.0, 1.0, 0.0, 1.0, 0.0])

        a = select_binary(group, "Random", seed=3)
        b = select_binary(group, "Random", seed=3)
        self.assertEqual(a.indices, b.indices)
        self.assertIsInstance(a, BinaryPair)
        self.assertEqual(group.rewards[a.positive_index], 1.0)
        self.assertEqual(group.rewards[a.negative_index], 0.0)

        seen = {select_binary(group, "Random", seed=s).indices for s in range(40)}
        self.assertGreater(len(seen), 1)

    def test_extreme_advantage_ties_go_low(self):

        group = manual_group([[1], [2], [3], [4]], [0.0, 1.0, 1.0, 0.0])
        pair = select_binary(group, SelectionStrategy.EXTREME_ADVANTAGE)
        self.assertEqual(pair.indices, (1, 0))

    def test_median_length(self):

        responses = [[1, 1, 1], [2], [3, 3], [4, 4, 4, 4], [5], [6, 6]]
        rewards = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        pair = select_binary(manual_group(responses, rewards), "MedianLength")

        # Positive lengths 3, 1, 2 -> 2; negative lengths 4, 1, 2 -> lower median 2
        self.assertEqual(pair.indices, (2, 5))

    def test_masks_follow_prefix(self):

        group = manual_group([[1, 2, 3, 4], [5, 6]], [1.0, 0.0])
        pair = select_binary(group, prefix=PrefixSpec.fraction(0.5))

        self.assertEqual([list(m) for m in pair.masks], [[1.0, 1.0, 0.0, 0.0], [1.0, 0.0]])
        self.assertEqual(pair.grad_token_count, 3)
        self.assertEqual(pair.weight, 0.5)

    def test_full_group(self):

        group = manual_group([[1, 2], [3], [4, 5, 6]], [1.0, 0.0, 0.0])
        selection = select_full_group(group)

        self.assertEqual(selection.indices, (0, 1, 2))
        self.assertEqual(selection.grad_token_count, 6)
        self.assertEqual(select_indices(group, [2], PrefixSpec.absolute(1)).grad_token_count, 1)


class TestLoss(unittest.TestCase):

    def setUp(self):

        self.params = tiny_params(seed=0, init_scale=0.2)
        self.ref = tiny_params(seed=1, init_scale=0.2)
        self.group = forced_group(self.params, [1.0, 0.0, 1.0, 0.0])

    def test_full_group_bppo_equals_grpo(self):

        cfg = ObjectiveConfig(beta=0.05)
        selection = select_full_group(self.group, PrefixSpec.fraction(1.0))

        bppo, _ = bppo_loss(self.params, self.group, selection, self.ref, cfg)
        grpo, _ = grpo_loss(self.params, self.group, self.ref, cfg)
        self.assertEqual(bppo.item(), grpo.item())

        _, grads_a = group_loss_and_gradients(self.params, self.group, selection, self.ref, cfg)
        _, grads_b = group_loss_and_gradients(
            self.params, self.group, select_full_group(self.group), self.ref, cfg
        )
        for name in grads_a:
            self.assertTrue(np.array_equal(grads_a[name], grads_b[name]))

    def test_on_policy_ratio_is_one(self):

        cfg = ObjectiveConfig(beta=0.0)
        loss, stats = grpo_loss(self.params, self.group, self.ref, cfg)

        self.assertAlmostEqual(stats.ratio_mean, 1.0, places=10)
        self.assertEqual(stats.clip_fraction, 0.0)
        self.assertEqual(stats.kl, 0.0)

        # Advantages sum to zero over the group
        self.assertAlmostEqual(loss.item(), 0.0, places=9)

    def test_tokens_past_prefix_are_ignored(self):

        cfg = ObjectiveConfig(beta=0.1)
        prefix = PrefixSpec.absolute(1)

        a = manual_group([[1, 2, 3], [4, 5]], [1.0, 0.0])
        b = manual_group([[1, 9, 9], [4, 7]], [1.0, 0.0])

        loss_a, stats_a = bppo_loss(self.params, a, select_full_group(a, prefix), self.ref, cfg)
        loss_b, _ = bppo_loss(self.params, b, select_full_group(b, prefix), self.ref, cfg)

        self.assertEqual(loss_a.item(), loss_b.item())
        self.assertEqual(stats_a.grad_token_count, 2)

    def test_clipping(self):

        # Behavior log-probs far below the policy's push every ratio above 1 + ε
        group = manual_group([[1, 2], [3, 4]], [1.0, 0.0], logprob=-20.0)
        _, stats = surrogate_loss(
            self.params, group, select_full_group(group), self.ref, ObjectiveConfig(beta=0.0)
        )

        self.assertGreater(stats.ratio_min, 1.2)
        self.assertEqual(stats.clip_fraction, 0.5)

    def test_log_ratio_clamp(self):

        group = manual_group([[1], [2]], [1.0, 0.0], logprob=-100.0)
        cfg = ObjectiveConfig(beta=0.0, log_ratio_clamp=20.0)
        loss, stats = surrogate_loss(self.params, group, select_full_group(group), self.ref, cfg)

        self.assertTrue(stats.log_ratio_clamped)
        self.assertTrue(np.isfinite(loss.item()))

    def test_bad_mask(self):

        group = manual_group([[1, 2], [3]], [1.0, 0.0])
        selection = select_indices(group, [0], PrefixSpec.fraction(1.0))
        broken = type(selection)(indices=(1,), masks=selection.masks)

        self.assertRaises(
            ValueError,
            lambda: surrogate_loss(self.params, group, broken, self.ref, ObjectiveConfig())
        )


class TestKL(unittest.TestCase):

    def test_zero_against_self(self):

        params = tiny_params(init_scale=0.2)

        self.assertEqual(token_kl(params, params, PROMPT), 0.0)
        self.assertEqual(token_kl(params, params, PROMPT, KLMode.K3, next_token=4), 0.0)

    def test_non_negative(self):

        a, b = tiny_params(seed=0, init_scale=0.2), tiny_params(seed=1, init_scale=0.2)

        self.assertGreater(token_kl(a, b, PROMPT), 0.0)
        self.assertGreaterEqual(token_kl(a, b, PROMPT, "K3Estimator", next_token=4), 0.0)

    def test_exact_matches_direct_sum(self):

        a, b = tiny_params(seed=0, init_scale=0.2), tiny_params(seed=1, init_scale=0.2)

        for context, depth in [(PROMPT, None), (PROMPT + (7,), 1), (PROMPT[:2], 2)]:

            log_p = log_softmax(forward_logits(a, context, depth).data[-1])
            log_q = log_softmax(forward_logits(b, context, depth).data[-1])
            expected = sum(
                math.exp(lp) * (lp - lq)
                for lp, lq in zip(log_p, log_q)
                if math.exp(lp) > 0.0
            )

            self.assertAlmostEqual(token_kl(a, b, context, KLMode.EXACT, exit_depth=depth), expected, delta=1e-12)

    def test_k3_needs_token(self):

        params = tiny_params()
        self.assertRaises(ValueError, lambda: token_kl(params, params, PROMPT, KLMode.K3))


class TestBatch(unittest.TestCase):

    def setUp(self):

        self.params = tiny_params(init_scale=0.2)
        self.ref = tiny_params(seed=1, init_scale=0.2)
        self.groups = [
            forced_group(self.params, [1.0, 0.0, 0.0, 1.0], seed=0, prompt_index=0),
            forced_group(self.params, [1.0, 1.0, 1.0, 1.0], seed=1, prompt_index=1),
            forced_group(self.params, [0.0, 1.0, 0.0, 0.0], seed=2, prompt_index=2),
        ]

    def test_degenerate_groups_skipped(self):

        result = batch_gradients(self.params, self.groups, "bppo", self.ref, ObjectiveConfig(), seed=0)

        self.assertEqual(result.n_groups, 3)
        self.assertEqual(result.n_skipped, 1)
        self.assertAlmostEqual(result.frac_skipped, 1 / 3)
        self.assertEqual(result.skipped[0].prompt_index, 1)

    def test_all_skipped_gives_zero_gradients(self):

        result = batch_gradients(self.params, self.groups[1:2], "bppo", self.ref, ObjectiveConfig(), seed=0)

        self.assertEqual(result.loss, 0.0)
        self.assertEqual(result.stats.grad_token_count, 0)
        self.assertTrue(all(np.all(g == 0) for g in result.grads.values()))

    def test_grpo_keeps_every_group(self):

        result = batch_gradients(self.params, self.groups, "grpo", self.ref, ObjectiveConfig(), seed=0)

        self.assertEqual(result.n_skipped, 0)
        self.assertEqual(
            result.stats.grad_token_count,
            sum(len(t) for g in self.groups for t in g.trajectories)
        )

    def test_bppo_half_prefix_token_bound(self):

        # Eight responses per group, all of one length
        for length in range(1, 7):
            for seed in range(5):

                responses = [[1 + (i + j) % 9 for j in range(length)] for i in range(8)]
                group = manual_group(responses, [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0])

                pair = select_binary(group, "Random", seed=seed, prefix=PrefixSpec.fraction(0.5))
                full = select_full_group(group)
                self.assertLessEqual(pair.grad_token_count, (2 / 8) * 0.5 * full.grad_token_count + 2)

                _, stats = bppo_loss(self.params, group, pair, self.ref, ObjectiveConfig(prefix="frac:0.5"))
                self.assertEqual(stats.grad_token_count, int(sum(m.sum() for m in pair.masks)))

    def test_shallow_member_gradients(self):

        cfg = ObjectiveConfig(beta=0.02)
        selection = select_full_group(self.groups[0])
        member = self.params.member(1)

        _, grads = group_loss_and_gradients(self.params, self.groups[0], selection, self.ref, cfg, exit_depth=1)
        self.assertEqual(set(grads), set(member.tensors))

        result = batch_gradients(self.params, self.groups, "grpo", self.ref, cfg, seed=0, exit_depth=1)
        for name in self.params.names:
            if name not in member.tensors:
                self.assertTrue(np.all(result.grads[name] == 0.0), name)
        self.assertTrue(np.any(result.grads["exits.1.head"] != 0.0))

    def test_workers_are_bit_identical(self):

        cfg = ObjectiveConfig(beta=0.02)
        serial = batch_gradients(self.params, self.groups, "bppo", self.ref, cfg, seed=4)
        threaded = batch_gradients(self.params, self.groups, "bppo", self.ref, cfg, seed=4, workers=3)

        self.assertEqual(serial.loss, threaded.loss)
        for name in serial.grads:
            self.assertTrue(np.array_equal(serial.grads[name], threaded.grads[name]))


if __name__ == '__main__':
    unittest.main()
