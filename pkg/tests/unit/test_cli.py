import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr
from pathlib import Path
from unittest import mock

import numpy as np

from tripose.cli import build_parser, main
from tripose.storage import load_poses
from tripose.verification import z_threshold

MANIFEST = Path("tests/fixtures/manifests/small.json")


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.data = self.root / "data"
        env = {"TRIPOSE_DATA_DIR": str(self.data), "TRIPOSE_LOG_LEVEL": "warning"}
        patcher = mock.patch.dict(os.environ, env)
        patcher.start()
        self.addCleanup(patcher.stop)

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *argv):
        stderr = io.StringIO()
        with redirect_stderr(stderr):
            code = main(list(argv))
        return code, stderr.getvalue()

    def gen_data(self):
        code, err = self.run_cli("gen-data", "--manifest", str(MANIFEST))
        self.assertEqual(code, 0, err)


class GenDataTests(CliTestCase):
    def test_writes_cells_and_lock(self):
        self.gen_data()
        lock = json.loads((self.data / "manifest.lock.json").read_text())
        self.assertEqual(len(lock["cells"]), 5)
        for name in ("truth.tpsq", "measurements.jsonl", "skeleton.json"):
            self.assertTrue((self.data / "cell-000" / name).exists(), name)
        echo = json.loads((self.data / "run_config.json").read_text())
        self.assertEqual(echo["command"], "gen-data")

    def test_same_manifest_gives_identical_files(self):
        first, second = self.root / "first", self.root / "second"
        for out in (first, second):
            code, err = self.run_cli("gen-data", "--manifest", str(MANIFEST), "--out", str(out))
            self.assertEqual(code, 0, err)
        for i in range(5):
            for name in ("truth.tpsq", "measurements.jsonl", "skeleton.json"):
                a = (first / f"cell-{i:03d}" / name).read_bytes()
                b = (second / f"cell-{i:03d}" / name).read_bytes()
                self.assertEqual(a, b, f"cell-{i:03d}/{name}")
        self.assertEqual(
            (first / "manifest.lock.json").read_bytes(),
            (second / "manifest.lock.json").read_bytes(),
        )

    def test_bone_noise_writes_guidance_skeleton(self):
        manifest = self.root / "bones.json"
        cells = [
            {"motion": {"kind": "squat", "frames": 6}},
            {"motion": {"kind": "squat", "frames": 6}, "sigma_b": 0.02},
        ]
        manifest.write_text(json.dumps({"cells": cells}))
        code, err = self.run_cli("gen-data", "--manifest", str(manifest))
        self.assertEqual(code, 0, err)
        self.assertFalse((self.data / "cell-000" / "guidance_skeleton.json").exists())
        self.assertTrue((self.data / "cell-001" / "guidance_skeleton.json").exists())

    def test_bad_worker_setting(self):
        with mock.patch.dict(os.environ, {"TRIPOSE_WORKERS": "many"}):
            code, err = self.run_cli("gen-data", "--manifest", str(MANIFEST))
        self.assertEqual(code, 2)
        self.assertIn("TRIPOSE_WORKERS must be an integer", err)

    def test_missing_manifest_flag(self):
        code, err = self.run_cli("gen-data")
        self.assertEqual(code, 2)
        self.assertIn("--manifest is required", err)

    def test_missing_manifest_file(self):
        code, err = self.run_cli("gen-data", "--manifest", str(self.root / "absent.json"))
        self.assertEqual(code, 2)
        self.assertIn("manifest not found", err)


class InferEvalTests(CliTestCase):
    def test_oracle_round_trip(self):
        self.gen_data()
        for i in range(5):
            cell = self.data / f"cell-{i:03d}"
            code, err = self.run_cli(
                "infer", "--cell", str(cell), "--oracle", str(cell / "truth.tpsq"), "--steps", "5"
            )
            self.assertEqual(code, 0, err)
        pred = load_poses(self.data / "cell-001" / "pred.tpsq")
        truth = load_poses(self.data / "cell-001" / "truth.tpsq")
        np.testing.assert_allclose(pred.rotations, truth.rotations, atol=1e-9)

        out = self.root / "report"
        code, err = self.run_cli(
            "eval",
            "--manifest",
            str(MANIFEST),
            "--pred",
            str(self.data),
            "--truth",
            str(self.data),
            "--out",
            str(out),
        )
        self.assertEqual(code, 0, err)
        report = json.loads((out / "report.json").read_text())
        self.assertEqual(len(report["cells"]), 5)
        noiseless = [c for c in report["cells"] if c["sigma_l"] == 0.0]
        self.assertEqual(len(noiseless), 2)
        for cell in noiseless:
            self.assertLess(cell["mpjpe"], 1e-6, cell["name"])
        self.assertTrue((out / "by_scale.csv").exists())
        self.assertTrue((out / "by_noise.csv").exists())
        self.assertTrue((out / "by_rotation_noise.csv").exists())
        self.assertTrue((out / "by_bone_noise.csv").exists())

    def test_checkpoint_and_oracle_are_exclusive(self):
        self.gen_data()
        cell = self.data / "cell-000"
        code, err = self.run_cli(
            "infer",
            "--cell",
            str(cell),
            "--oracle",
            str(cell / "truth.tpsq"),
            "--checkpoint",
            str(self.root / "x.ckpt"),
        )
        self.assertEqual(code, 2)
        self.assertIn("exactly one of", err)

    def test_missing_measurements(self):
        code, err = self.run_cli(
            "infer",
            "--measurements",
            str(self.root / "absent.jsonl"),
            "--oracle",
            str(self.root / "absent.tpsq"),
            "--out",
            str(self.root / "pred.tpsq"),
        )
        self.assertEqual(code, 2)
        self.assertIn("file not found", err)

    def test_config_file_sets_options(self):
        self.gen_data()
        cell = self.data / "cell-001"
        config = self.root / "infer.json"
        config.write_text(json.dumps({"steps": 3, "seed": 9}))
        code, err = self.run_cli(
            "infer",
            "--config",
            str(config),
            "--cell",
            str(cell),
            "--oracle",
            str(cell / "truth.tpsq"),
        )
        self.assertEqual(code, 0, err)
        echo = json.loads((cell / "run_config.json").read_text())
        self.assertEqual(echo["options"]["steps"], 3)
        self.assertEqual(echo["options"]["seed"], 9)

    def test_unknown_config_key(self):
        config = self.root / "infer.json"
        config.write_text(json.dumps({"stepz": 3}))
        code, err = self.run_cli("infer", "--config", str(config))
        self.assertEqual(code, 2)
        self.assertIn("unknown options", err)


class TrainTests(CliTestCase):
    def test_train_then_infer(self):
        self.gen_data()
        ckpt = self.root / "models" / "denoiser.ckpt"
        code, err = self.run_cli(
            "train",
            "--data",
            str(self.data),
            "--out",
            str(ckpt),
            "--window",
            "8",
            "--train-steps",
            "2",
            "--batch-size",
            "2",
        )
        self.assertEqual(code, 0, err)
        self.assertTrue(ckpt.exists())
        self.assertTrue(ckpt.with_suffix(".loss.csv").exists())

        cell = self.data / "cell-001"
        code, err = self.run_cli(
            "infer",
            "--cell",
            str(cell),
            "--checkpoint",
            str(ckpt),
            "--steps",
            "2",
            "--guidance-scale",
            "0",
        )
        self.assertEqual(code, 0, err)
        self.assertEqual(load_poses(cell / "pred.tpsq").frames, 15)

    def test_no_data(self):
        code, err = self.run_cli("train", "--data", str(self.root / "empty"))
        self.assertEqual(code, 2)
        self.assertIn("no cell directories", err)


class VerifyTests(CliTestCase):
    def test_injected_sign_error_fails(self):
        out = self.root / "verify"
        code, _ = self.run_cli(
            "verify",
            "--samples",
            "20000",
            "--points",
            "1",
            "--inject-sign-error",
            "R13,r2",
            "--out",
            str(out),
        )
        self.assertEqual(code, 1)
        payload = json.loads((out / "verification.json").read_text())
        self.assertFalse(payload["valid"])
        covariance = payload["suites"][0]
        self.assertAlmostEqual(covariance["z_threshold"], z_threshold(3 * 54))
        self.assertIsNone(payload["suites"][1]["z_threshold"])

    def test_malformed_injection(self):
        code, err = self.run_cli("verify", "--inject-sign-error", "R13")
        self.assertEqual(code, 2)
        self.assertIn("two entry names", err)


class ParserTests(unittest.TestCase):
    def test_every_command_takes_a_config_file(self):
        parser = build_parser()
        for command in ("gen-data", "train", "infer", "eval", "verify", "benchmark"):
            args = parser.parse_args([command, "--config", "x.json"])
            self.assertEqual(args.config, "x.json")


if __name__ == "__main__":
    unittest.main()
