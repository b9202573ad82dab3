from datetime import datetime
import json
import os
import tempfile
import unittest
from unittest.mock import patch
from bppo.base import run
from bppo.base.exceptions import ConfigurationException
from bppo.base.io import append_jsonl, read_json, write_json, write_lines


class TestIO(unittest.TestCase):

    def test_json(self):

        with tempfile.TemporaryDirectory() as tmp:

            path = os.path.join(tmp, "nested", "config.json")
            write_json(path, {"b": 2, "a": {"y": 1, "x": 0}})

            self.assertEqual(read_json(path), {"a": {"x": 0, "y": 1}, "b": 2})

            # Keys are sorted so that reruns write identical bytes
            with open(path) as handle:
                self.assertEqual(handle.read(), '{"a": {"x": 0, "y": 1}, "b": 2}\n')

    def test_read_json_errors(self):

        with tempfile.TemporaryDirectory() as tmp:

            self.assertRaises(ConfigurationException, lambda: read_json(os.path.join(tmp, "none.json")))

            broken = os.path.join(tmp, "broken.json")
            with open(broken, "w") as handle:
                handle.write("{not json")
            self.assertRaises(ConfigurationException, lambda: read_json(broken))

            listing = os.path.join(tmp, "list.json")
            with open(listing, "w") as handle:
                json.dump([1, 2], handle)
            self.assertRaises(ConfigurationException, lambda: read_json(listing))

    def test_jsonl(self):

        with tempfile.TemporaryDirectory() as tmp:

            path = os.path.join(tmp, "log.jsonl")
            append_jsonl(path, {"step": 1, "loss": 0.5})
            append_jsonl(path, {"step": 2, "loss": 0.25})

            with open(path) as handle:
                self.assertEqual(handle.read(), '{"loss": 0.5, "step": 1}\n{"loss": 0.25, "step": 2}\n')

    def test_write_lines(self):

        with tempfile.TemporaryDirectory() as tmp:

            path = os.path.join(tmp, "sub", "pool.txt")
            write_lines(path, ["15 1 12", "15 2 12"])

            with open(path) as handle:
                self.assertEqual(handle.read(), "15 1 12\n15 2 12\n")


class TestRunDir(unittest.TestCase):

    def test_open_run_dir(self):

        with tempfile.TemporaryDirectory() as tmp:

            run_dir = os.path.join(tmp, "run")
            manifest = run.RunManifest(subcommand="train", seed=4, config={"seed": 4})
            opened = run.open_run_dir(run_dir, manifest)

            self.assertEqual(str(opened), run_dir)
            self.assertEqual(read_json(os.path.join(run_dir, run.CONFIG_FILE)), {"seed": 4})

            loaded = run.RunManifest.read(run_dir)
            self.assertEqual(loaded.subcommand, "train")
            self.assertEqual(loaded.seed, 4)
            self.assertEqual(loaded.started_at, manifest.started_at)

            # A directory holding a run is never reused
            self.assertRaises(ConfigurationException, lambda: run.open_run_dir(run_dir, manifest))

    def test_invalid_manifest(self):

        with tempfile.TemporaryDirectory() as tmp:

            write_json(os.path.join(tmp, run.MANIFEST_FILE), {"subcommand": "train"})
            self.assertRaises(ConfigurationException, lambda: run.RunManifest.read(tmp))

    def test_default_run_dirs_never_collide(self):

        frozen = datetime(2026, 1, 2, 3, 4, 5, 678)

        with tempfile.TemporaryDirectory() as tmp, patch("bppo.base.run.datetime") as clock:

            clock.now.return_value = frozen

            first = run.default_run_dir(7, root=tmp)
            self.assertEqual(first.name, "20260102-030405-000678-seed7")
            first.mkdir()

            second = run.default_run_dir(7, root=tmp)
            self.assertEqual(second.name, "20260102-030405-000678-2-seed7")
            second.mkdir()

            self.assertEqual(run.default_run_dir(7, root=tmp).name, "20260102-030405-000678-3-seed7")

    def test_paths(self):

        self.assertEqual(
            str(run.checkpoint_path("runs/x", 12)),
            os.path.join("runs/x", run.CHECKPOINT_DIR, "step_000012.ckpt")
        )
        self.assertTrue(run.default_run_dir(7).name.endswith("-seed7"))
        self.assertEqual(run.default_run_dir(7, root="out").parent.name, "out")


if __name__ == '__main__':
    unittest.main()
