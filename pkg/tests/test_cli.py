import contextlib
import io
import json
import os
import tempfile
import unittest

import numpy as np

from neureg.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, finite_or_none, main
from neureg.volume import LabelVolume, Volume3, load_raw, save_raw

SYSTEM_CONFIG = "./tests/test_config/system.yaml"
TEST_CONFIG = "./tests/test_config/test.json"


def run(*argv, system_config=SYSTEM_CONFIG):
    """Run the CLI and return (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv), system_config_path=system_config)
    return code, out.getvalue(), err.getvalue()


class TestDispatch(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        rng = np.random.default_rng(0)
        self.volume = Volume3(rng.uniform(size=(8, 9, 10)))
        self.fixed = self.path("fixed.nrv")
        save_raw(self.volume, self.fixed)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.dir, name)

    def test_evaluate_identical_volumes(self):
        report = self.path("report.json")
        code, out, _ = run("evaluate", "--fixed", self.fixed, "--warped", self.fixed, "--report", report, "--quiet")
        self.assertEqual(code, EXIT_OK)
        with open(report) as f:
            content = json.load(f)
        self.assertAlmostEqual(content["ssim"], 1.0, places=12)
        self.assertIsNone(content["dice_mean"])
        self.assertIsNone(content["jacobian_min"])
        manifest = json.loads(out.strip())
        self.assertEqual(manifest["command"], "evaluate")
        self.assertIn(self.fixed, manifest["input_hashes"])

    def test_missing_fixed(self):
        code, _, err = run("evaluate", "--warped", self.fixed, "--report", self.path("r.json"))
        self.assertEqual(code, EXIT_INVALID)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "missing_argument")

    def test_unknown_command(self):
        code, _, err = run("frobnicate")
        self.assertEqual(code, EXIT_INVALID)
        self.assertIn("usage", err)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "invalid_input")

    def test_no_command(self):
        code, _, _ = run()
        self.assertEqual(code, EXIT_INVALID)

    def test_unpaired_labels(self):
        labels = self.path("labels.nrv")
        save_raw(LabelVolume(np.ones((8, 9, 10), dtype=np.uint16)), labels)
        code, _, err = run(
            "evaluate", "--fixed", self.fixed, "--warped", self.fixed,
            "--fixed-labels", labels, "--report", self.path("r.json"),
        )
        self.assertEqual(code, EXIT_INVALID)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "missing_argument")

    def test_missing_file_is_io_error(self):
        code, _, err = run(
            "evaluate", "--fixed", self.path("absent.nrv"), "--warped", self.fixed,
            "--report", self.path("r.json"),
        )
        self.assertEqual(code, EXIT_IO)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "io_error")

    def test_bad_magic_exits_with_io_code(self):
        bad = self.path("bad.nrv")
        with open(bad, "wb") as f:
            f.write(b"JUNK" + bytes(20))
        code, _, err = run("evaluate", "--fixed", bad, "--warped", self.fixed, "--report", self.path("r.json"))
        self.assertEqual(code, EXIT_IO)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "bad_magic")

    def test_invalid_config(self):
        config = self.path("config.json")
        with open(config, "w") as f:
            json.dump({"lr": -1.0}, f)
        os.makedirs(self.path("data"))
        code, _, err = run("train", "--config", config, "--data", self.path("data"), "--out", self.path("m.nrc"))
        self.assertEqual(code, EXIT_INVALID)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "invalid_config")

    def test_preprocess(self):
        out = self.path("dg.nrv")
        code, stdout, _ = run("preprocess", "--in", self.fixed, "--out", out, "--patch-size", "2", "--quiet")
        self.assertEqual(code, EXIT_OK)
        result = load_raw(out)
        self.assertEqual(result.dims, (8, 9, 10))
        self.assertAlmostEqual(float(result.data.max()), 1.0)
        self.assertEqual(json.loads(stdout)["config"], {"patch_size": 2})

    def test_malformed_dims(self):
        code, _, err = run("synth", "--out", self.path("x"), "--dims", "16,x,16")
        self.assertEqual(code, EXIT_INVALID)
        error = json.loads(err.strip().splitlines()[-1])
        self.assertEqual(error["code"], "invalid_input")
        self.assertIn("16,x,16", error["message"])
        self.assertFalse(os.path.exists(self.path("x")))

    def test_dims_need_three_extents(self):
        code, _, err = run("synth", "--out", self.path("x"), "--dims", "16,16")
        self.assertEqual(code, EXIT_INVALID)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "invalid_input")

    def test_malformed_seeds(self):
        code, _, err = run(
            "experiment", "--data", self.dir, "--report", self.path("r.json"), "--seeds", "1,a"
        )
        self.assertEqual(code, EXIT_INVALID)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "invalid_input")
        self.assertFalse(os.path.exists(self.path("r.json")))

    def test_finite_or_none(self):
        self.assertEqual(finite_or_none({"a": float("nan"), "b": [1.0, float("inf")]}), {"a": None, "b": [1.0, None]})


class TestWritesOnlyNamedPaths(unittest.TestCase):
    def setUp(self):
        self.system_config = os.path.abspath("./config.yaml")
        self.workdir = tempfile.TemporaryDirectory()
        self.io = tempfile.TemporaryDirectory()
        self.fixed = os.path.join(self.io.name, "fixed.nrv")
        save_raw(Volume3(np.random.default_rng(1).uniform(size=(8, 8, 8))), self.fixed)
        cwd = os.getcwd()
        os.chdir(self.workdir.name)
        self.addCleanup(os.chdir, cwd)

    def tearDown(self):
        self.workdir.cleanup()
        self.io.cleanup()

    def test_default_config_creates_no_log_file(self):
        report = os.path.join(self.io.name, "report.json")
        code, _, _ = run(
            "evaluate", "--fixed", self.fixed, "--warped", self.fixed, "--report", report,
            system_config=self.system_config,
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(os.listdir(self.workdir.name), [])
        self.assertEqual(sorted(os.listdir(self.io.name)), ["fixed.nrv", "report.json"])

    def test_log_file_flag(self):
        report = os.path.join(self.io.name, "report.json")
        log_file = os.path.join(self.io.name, "logs", "run.log")
        code, _, _ = run(
            "evaluate", "--fixed", self.fixed, "--warped", self.fixed, "--report", report,
            "--log-file", log_file, system_config=self.system_config,
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(os.listdir(self.workdir.name), [])
        with open(log_file) as f:
            self.assertIn("evaluate finished", f.read())


class TestPipeline(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.dir, name)

    def test_synth_train_register_evaluate(self):
        data = self.path("data")
        code, out, _ = run(
            "synth", "--out", data, "--subjects", "3", "--domains", "identity,inverted",
            "--dims", "16,16,16", "--seed", "1", "--quiet",
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads(out)["metrics"]["n_samples"], 6)

        checkpoint = self.path("model.nrc")
        metrics = self.path("metrics")
        manifest_file = self.path("train_manifest.json")
        code, out, _ = run(
            "train", "--config", TEST_CONFIG, "--data", data, "--out", checkpoint,
            "--metrics-dir", metrics, "--manifest", manifest_file, "--quiet",
        )
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.exists(checkpoint))
        self.assertEqual(len(os.listdir(metrics)), 1)
        with open(manifest_file) as f:
            self.assertEqual(json.load(f), json.loads(out))

        warped, field, labels = self.path("warped.nrv"), self.path("field.nrv"), self.path("labels.nrv")
        code, _, _ = run(
            "register",
            "--fixed", os.path.join(data, "sub000_inverted_image.nrv"),
            "--moving", os.path.join(data, "sub001_inverted_image.nrv"),
            "--checkpoint", checkpoint,
            "--out-warped", warped, "--out-field", field,
            "--moving-labels", os.path.join(data, "sub001_inverted_labels.nrv"),
            "--out-labels", labels,
            "--quiet",
        )
        self.assertEqual(code, EXIT_OK)

        report = self.path("report.json")
        code, _, _ = run(
            "evaluate",
            "--fixed", os.path.join(data, "sub000_inverted_image.nrv"),
            "--warped", warped,
            "--fixed-labels", os.path.join(data, "sub000_inverted_labels.nrv"),
            "--warped-labels", labels,
            "--field", field,
            "--report", report,
            "--quiet",
        )
        self.assertEqual(code, EXIT_OK)
        with open(report) as f:
            content = json.load(f)
        for key in ("ssim", "dice_mean", "jacobian_min", "jacobian_nonpos_fraction"):
            self.assertTrue(np.isfinite(content[key]), msg=key)
        self.assertGreaterEqual(content["dice_mean"], 0.0)
        self.assertLessEqual(content["dice_mean"], 1.0)
        self.assertTrue(set(content["dice_per_label"]) <= {"1", "2", "3", "4"})

    def test_experiment_ablation(self):
        data = self.path("data")
        code, _, _ = run(
            "synth", "--out", data, "--subjects", "3", "--domains", "identity,inverted",
            "--dims", "16,16,16", "--seed", "2", "--quiet",
        )
        self.assertEqual(code, EXIT_OK)
        report = self.path("ablation.json")
        code, out, _ = run(
            "experiment", "--data", data, "--mode", "ablation", "--config", TEST_CONFIG,
            "--seeds", "0", "--max-pairs", "1", "--report", report, "--quiet",
        )
        self.assertEqual(code, EXIT_OK)
        with open(report) as f:
            content = json.load(f)
        self.assertEqual(content["mode"], "ablation")
        self.assertEqual(len(content["rows"]), 1)
        for key in ("dice_with_dg", "dice_without_dg", "dice_baseline", "dg_gain"):
            self.assertIn(key, content["summary"])
        self.assertEqual(json.loads(out)["metrics"], content["summary"])

    def test_synth_is_deterministic(self):
        hashes = []
        for name in ("a", "b"):
            code, out, _ = run("synth", "--out", self.path(name), "--subjects", "2", "--dims", "16,16,16", "--quiet")
            self.assertEqual(code, EXIT_OK)
            with open(os.path.join(self.path(name), "sub001_inverted_image.nrv"), "rb") as f:
                hashes.append(f.read())
        self.assertEqual(hashes[0], hashes[1])

    def test_synth_unknown_domain(self):
        code, _, err = run("synth", "--out", self.path("x"), "--domains", "identity,martian", "--dims", "16,16,16")
        self.assertEqual(code, EXIT_INVALID)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])["code"], "invalid_input")


if __name__ == "__main__":
    unittest.main()
