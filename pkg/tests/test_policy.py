import os
import tempfile
import unittest
import numpy as np
from bppo.base.exceptions import CheckpointException, ConfigurationException
from bppo.base.io import load_checkpoint, save_checkpoint
from bppo.policy import (
    PolicyConfig, forward_logits, forward_logprobs,
    greedy_response, hidden_states, sample_response, token_logprob
)
from bppo.policy.model import exit_head
from bppo.policy.sampling import _draw_token
from bppo.tasks import TaskSpec, gen_instances, vocab
from tests.fixtures import TINY, tiny_params

PROMPT = vocab.encode("<bos> 3 + 4 =")


class TestPolicyConfig(unittest.TestCase):

    def test_invalid(self):

        self.assertRaises(ConfigurationException, lambda: PolicyConfig(d_model=10, n_heads=4))
        self.assertRaises(ConfigurationException, lambda: PolicyConfig(exit_depths=()))
        self.assertRaises(ConfigurationException, lambda: PolicyConfig(exit_depths=(4, 1)))
        self.assertRaises(ConfigurationException, lambda: PolicyConfig(exit_depths=(1, 3)))
        self.assertRaises(ConfigurationException, lambda: PolicyConfig(init_scale=0.0))

    def test_dict(self):

        self.assertEqual(PolicyConfig.from_dict(TINY.to_dict()), TINY)
        self.assertRaises(ConfigurationException, lambda: PolicyConfig.from_dict({"width": 3}))


class TestParams(unittest.TestCase):

    def test_init_deterministic(self):

        a, b = tiny_params(seed=3), tiny_params(seed=3)
        self.assertTrue(np.array_equal(a.flatten(), b.flatten()))
        self.assertFalse(np.array_equal(a.flatten(), tiny_params(seed=4).flatten()))

    def test_norm_offsets_start_at_zero(self):

        params = tiny_params()
        for name, tensor in params.tensors.items():
            if name.endswith("norm"):
                self.assertTrue(np.all(tensor.data == 0))

    def test_member_shares_backbone(self):

        params = tiny_params()
        shallow, deep = params.member(1), params.member(2)

        self.assertIs(shallow.tensors["tok_emb"], deep.tensors["tok_emb"])
        self.assertIs(shallow.tensors["blocks.0.wq"], params.tensors["blocks.0.wq"])
        self.assertNotIn("blocks.1.wq", shallow.tensors)
        self.assertNotIn("exits.2.head", shallow.tensors)
        self.assertLess(shallow.n_params(), deep.n_params())
        self.assertRaises(ConfigurationException, lambda: params.member(3))

    def test_replace_and_clone(self):

        params = tiny_params()
        updated = params.replace({"tok_emb": np.zeros((32, 16))})

        self.assertTrue(np.all(updated.tensors["tok_emb"].data == 0))
        self.assertFalse(np.all(params.tensors["tok_emb"].data == 0))
        self.assertIs(updated.tensors["pos_emb"], params.tensors["pos_emb"])
        self.assertIsNot(params.clone().tensors["pos_emb"], params.tensors["pos_emb"])
        self.assertRaises(ConfigurationException, lambda: params.replace({"nope": np.zeros(1)}))


class TestModel(unittest.TestCase):

    def test_shapes(self):

        params = tiny_params()
        self.assertEqual(forward_logits(params, PROMPT).shape, (len(PROMPT), 32))

        logp = forward_logprobs(params, PROMPT, exit_depth=1).data
        self.assertTrue(np.allclose(np.exp(logp).sum(axis=-1), 1.0))

    def test_shallow_exit_is_truncated_deep_pass(self):

        params = tiny_params(init_scale=0.2)

        deep_states = hidden_states(params, PROMPT)
        shallow_states = hidden_states(params, PROMPT, depth=1)
        self.assertTrue(np.array_equal(deep_states[0].data, shallow_states[0].data))

        shallow = forward_logits(params, PROMPT, exit_depth=1)
        expected = exit_head(params, deep_states[0], 1)
        self.assertTrue(np.array_equal(shallow.data, expected.data))

    def test_causal(self):

        params = tiny_params(init_scale=0.2)
        full = forward_logits(params, PROMPT + [5, 6]).data
        prefix = forward_logits(params, PROMPT).data
        self.assertTrue(np.allclose(full[:len(PROMPT)], prefix, rtol=0, atol=1e-10))

    def test_token_logprob(self):

        params = tiny_params()
        expected = forward_logprobs(params, PROMPT).data[-1, 7]
        self.assertEqual(token_logprob(params, PROMPT, 7), expected)
        self.assertRaises(ConfigurationException, lambda: token_logprob(params, PROMPT, 32))

    def test_invalid_inputs(self):

        params = tiny_params()
        self.assertRaises(ConfigurationException, lambda: forward_logits(params, []))
        self.assertRaises(ConfigurationException, lambda: forward_logits(params, [40]))
        self.assertRaises(ConfigurationException, lambda: forward_logits(params, [0] * 33))
        self.assertRaises(ConfigurationException, lambda: forward_logits(params, PROMPT, 3))


class TestSampling(unittest.TestCase):

    def test_deterministic(self):

        params = tiny_params()
        a = sample_response(params, PROMPT, 1.0, 6, seed=(1, 2, 3))
        b = sample_response(params, PROMPT, 1.0, 6, seed=(1, 2, 3))
        self.assertEqual(a, b)

    def test_limits(self):

        params = tiny_params()
        for i in range(10):
            traj = sample_response(params, PROMPT, 1.0, 3, seed=i)
            self.assertLessEqual(len(traj), 3)
            self.assertTrue(all(lp <= 0 for lp in traj.behavior_logprobs))
            self.assertEqual(traj.prompt_tokens, tuple(PROMPT))
            if vocab.EOS in traj.response_tokens:
                self.assertEqual(traj.response_tokens[-1], vocab.EOS)

    def test_context_limit(self):

        params = tiny_params()
        prompt = [vocab.BOS] + [1] * 30
        traj = sample_response(params, prompt, 1.0, 10, seed=0)
        self.assertLessEqual(len(prompt) + len(traj) - 1, TINY.context_len)

    def test_forced_prefix(self):

        params = tiny_params()
        traj = sample_response(params, PROMPT, 1.0, 5, seed=0, response_prefix=[9, 9])
        self.assertEqual(traj.response_tokens[:2], (9, 9))

        expected = token_logprob(params, PROMPT + [9], 9)
        self.assertAlmostEqual(traj.behavior_logprobs[1], min(expected, 0.0), places=12)

    def test_greedy_is_argmax(self):

        params = tiny_params(init_scale=0.2)
        response = greedy_response(params, PROMPT, 1)
        logits = forward_logits(params, PROMPT).data[-1]
        self.assertEqual(response, (int(np.argmax(logits)),))

    def test_negative_temperature(self):

        params = tiny_params()
        self.assertRaises(ConfigurationException, lambda: sample_response(params, PROMPT, -1.0, 3, seed=0))

    def test_never_samples_pad(self):

        params = tiny_params(init_scale=0.2)
        prompts = [inst.prompt_tokens for inst in gen_instances(TaskSpec(), 20, seed=0)]

        for prompt in prompts:
            logp = forward_logprobs(params, prompt).data
            self.assertTrue(np.all(np.exp(logp[:, vocab.PAD]) == 0.0))

            for seed in range(10):
                traj = sample_response(params, prompt, 1.0, 5, seed=seed)
                self.assertNotIn(vocab.PAD, traj.response_tokens)

    def test_draw_frequency(self):

        # softmax([log 3, 0]) puts 0.75 on token 0
        rng = np.random.default_rng(0)
        logits = np.array([np.log(3.0), 0.0])
        draws = [_draw_token(logits, 1.0, rng) for _ in range(20000)]

        self.assertAlmostEqual(draws.count(0) / len(draws), 0.75, delta=0.015)

    def test_sample_frequency_with_flat_head(self):

        # A zero head gives every non-PAD token probability 1/31
        params = tiny_params(init_scale=0.2)
        head = f"exits.{TINY.deepest}.head"
        flat = params.replace({head: np.zeros(params.tensors[head].shape)})

        first = [sample_response(flat, PROMPT, 1.0, 1, seed=i).response_tokens[0] for i in range(3100)]

        self.assertNotIn(vocab.PAD, first)
        self.assertAlmostEqual(first.count(3) / len(first), 1 / 31, delta=0.012)
        self.assertAlmostEqual(first.count(vocab.EOS) / len(first), 1 / 31, delta=0.012)


class TestCheckpoint(unittest.TestCase):

    def test_save_load(self):

        params = tiny_params(seed=5)

        with tempfile.TemporaryDirectory() as tmp:

            path = os.path.join(tmp, "sub", "policy.ckpt")
            save_checkpoint(path, params, {"step": 3})
            loaded, metadata = load_checkpoint(path)

            self.assertEqual(loaded.config, params.config)
            self.assertEqual(loaded.names, params.names)
            self.assertTrue(np.array_equal(loaded.flatten(), params.flatten()))
            self.assertEqual(metadata, {"step": 3})

    def test_bad_files(self):

        with tempfile.TemporaryDirectory() as tmp:

            self.assertRaises(CheckpointException, lambda: load_checkpoint(os.path.join(tmp, "missing.ckpt")))

            bogus = os.path.join(tmp, "bogus.ckpt")
            with open(bogus, "w") as handle:
                handle.write("not json\n")
            self.assertRaises(CheckpointException, lambda: load_checkpoint(bogus))

            truncated = os.path.join(tmp, "truncated.ckpt")
            save_checkpoint(truncated, tiny_params())
            with open(truncated, "rb") as handle:
                data = handle.read()
            with open(truncated, "wb") as handle:
                handle.write(data[:-8])
            self.assertRaises(CheckpointException, lambda: load_checkpoint(truncated))


if __name__ == '__main__':
    unittest.main()
