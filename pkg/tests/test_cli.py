import json
import click
import os
import tempfile
from click.testing import CliRunner
import unittest
from bppo.base.io import save_checkpoint
from bppo.cli.main import main
from tests.fixtures import TINY, tiny_params

TINY_CONFIG = dict(
    policy=TINY.to_dict(),
    group_size=2,
    batch_prompts=2,
    steps=2,
    eval_size=4,
    eval_every=1,
    checkpoint_every=1,
    max_response_len=4,
    warmup=dict(batch_size=4, max_steps=2, eval_every=1, eval_size=4, target_accuracy=1.0),
)


class TestCLI(unittest.TestCase):

    def setUp(self):

        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        self.runner = CliRunner()

        self.config = os.path.join(self.dir, "tiny.json")
        with open(self.config, "w") as handle:
            json.dump(TINY_CONFIG, handle)

        self.ckpt = os.path.join(self.dir, "tiny.ckpt")
        save_checkpoint(self.ckpt, tiny_params())

    def tearDown(self):
        self.tmp.cleanup()

    def invoke(self, *args):
        return self.runner.invoke(main, [str(a) for a in args])

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def test_primary(self):

        result = self.invoke("--help")
        self.assertEqual(result.exit_code, 0)
        self.assertIn("warmup", result.output)

        for command in ["warmup", "train", "eval", "analyze", "curate", "compare"]:
            result = self.invoke(command, "--help")
            self.assertEqual(result.exit_code, 0, result.output)

    def test_every_option_documented(self):

        def commands(group, prefix=()):
            for name, command in group.commands.items():
                yield prefix + (name,), command
                if isinstance(command, click.Group):
                    yield from commands(command, prefix + (name,))

        for path, command in commands(main):
            for param in command.params:
                if isinstance(param, click.Option):
                    self.assertTrue(param.help, f"{' '.join(path)} {param.opts[0]}")

            result = self.invoke(*path, "--help")
            self.assertEqual(result.exit_code, 0, result.output)

    def test_usage_error(self):

        result = self.invoke("train")
        self.assertEqual(result.exit_code, 2)

    def test_fdcheck_quadratic(self):

        result = self.invoke("analyze", "fdcheck", "--loss", "quadratic", "--coords", 4, "--run-dir", self.path("fd"))

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("loss=quadratic coords=4", result.output)
        self.assertTrue(os.path.exists(self.path("fd", "fdcheck.json")))
        self.assertTrue(os.path.exists(self.path("fd", "manifest.json")))

    def test_fdcheck_failure(self):

        result = self.invoke(
            "analyze", "fdcheck", "--loss", "quadratic", "--coords", 4,
            "--threshold", 0.0, "--run-dir", self.path("fd")
        )

        self.assertEqual(result.exit_code, 6)
        self.assertIn("error=GradientCheckException code=6", result.output)

    def test_run_dir_reuse(self):

        args = ["analyze", "fdcheck", "--loss", "quadratic", "--coords", 2, "--run-dir", self.path("fd")]
        self.assertEqual(self.invoke(*args).exit_code, 0)

        result = self.invoke(*args)
        self.assertEqual(result.exit_code, 3)
        self.assertIn("error=ConfigurationException code=3", result.output)

    def test_missing_checkpoint(self):

        result = self.invoke("eval", self.path("none.ckpt"), "--run-dir", self.path("ev"))
        self.assertEqual(result.exit_code, 4)
        self.assertIn("error=CheckpointException", result.output)

    def test_bad_override(self):

        result = self.invoke(
            "warmup", "--config", self.config, "--set", "policy.d_model=15", "--run-dir", self.path("wu")
        )
        self.assertEqual(result.exit_code, 3)

        result = self.invoke("warmup", "--config", self.config, "--set", "noequals", "--run-dir", self.path("wu2"))
        self.assertEqual(result.exit_code, 3)

    def test_eval(self):

        result = self.invoke("eval", self.ckpt, "-n", 4, "--max-len", 3, "--run-dir", self.path("ev"))

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("accuracy=", result.output)

        with open(self.path("ev", "eval.json")) as handle:
            self.assertEqual(json.load(handle)["n_instances"], 4)

    def test_warmup_miss_still_writes_checkpoint(self):

        result = self.invoke("warmup", "--config", self.config, "--seed", 1, "--run-dir", self.path("wu"))

        self.assertEqual(result.exit_code, 5, result.output)
        self.assertIn("error=WarmupFailedException", result.output)
        self.assertTrue(os.path.exists(self.path("wu", "final.ckpt")))

    def test_train_and_compare(self):

        for algo in ["grpo", "bppo"]:
            result = self.invoke(
                "train", "--ref", self.ckpt, "--config", self.config, "--algo", algo,
                "--run-dir", self.path(algo)
            )
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn("steps=2", result.output)

            for name in ["manifest.json", "config.json", "metrics.jsonl", "timings.jsonl", "final.ckpt", "summary.json"]:
                self.assertTrue(os.path.exists(self.path(algo, name)), name)

        result = self.invoke("compare", self.path("bppo"), self.path("grpo"), "--run-dir", self.path("cmp"))

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("ratio = run_a / run_b", result.output)
        self.assertTrue(os.path.exists(self.path("cmp", "cost_report.csv")))

    def test_train_ref_from_config(self):

        config = self.path("with_ref.json")
        with open(config, "w") as handle:
            json.dump(dict(TINY_CONFIG, ref_checkpoint=self.ckpt), handle)

        result = self.invoke("train", "--algo", "bppo", "--config", config, "--seed", 7, "--run-dir", self.path("b"))
        self.assertEqual(result.exit_code, 0, result.output)

        with open(self.path("b", "config.json")) as handle:
            self.assertEqual(json.load(handle)["ref_checkpoint"], self.ckpt)

        # --ref wins over the file
        result = self.invoke(
            "train", "--ref", self.path("none.ckpt"), "--config", config, "--seed", 7, "--run-dir", self.path("c")
        )
        self.assertEqual(result.exit_code, 4)

    def test_train_without_ref(self):

        result = self.invoke("train", "--config", self.config, "--run-dir", self.path("t"))
        self.assertEqual(result.exit_code, 2)
        self.assertIn("ref_checkpoint", result.output)

    def test_compare_schema_error(self):

        os.makedirs(self.path("bad"))
        with open(self.path("bad", "metrics.jsonl"), "w") as handle:
            handle.write('{"step": 1}\n')

        result = self.invoke("compare", self.path("bad"), self.path("bad"), "--run-dir", self.path("cmp"))
        self.assertEqual(result.exit_code, 8)

    def test_curate(self):

        with open(self.path("pool.txt"), "w") as handle:
            for i in range(6):
                handle.write(f"15 {i} {(i * 3) % 10} 12\n")

        result = self.invoke("curate", self.path("pool.txt"), self.ckpt, "-k", 2, "-m", 2, "--run-dir", self.path("cur"))

        self.assertEqual(result.exit_code, 0, result.output)

        with open(self.path("cur", "curated_pool.txt")) as handle:
            self.assertEqual(len(handle.read().split("\n")), 5)

        result = self.invoke("curate", self.path("pool.txt"), self.ckpt, "-k", 4, "-m", 2, "--run-dir", self.path("cur2"))
        self.assertEqual(result.exit_code, 3)


if __name__ == '__main__':
    unittest.main()
