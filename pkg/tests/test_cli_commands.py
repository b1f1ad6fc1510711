"""
CLI Command Extensions for Flask

Test cases can be run with:
    nosetests
    coverage report -m
"""
import os
import json
import logging
import tempfile
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch, MagicMock
import pandas as pd
from click.testing import CliRunner
from evasionlab import app
from evasionlab.common import status
from evasionlab.common.cli_commands import (
    build_dict,
    db_create,
    evaluate_transfer_command,
    extract_command,
    ingest_command,
    report,
    synth_corpus,
    train_agent_command,
    train_detector,
    train_gan_command,
)
from evasionlab.config import load_settings
from evasionlab.featurizer import feature_layout_digest
from evasionlab.harness import write_report, evaluate_actions
from evasionlab.models import CorpusSample, db
from evasionlab.synthetic import build_desk_corpus
from tests.factories import malicious_pe, toy_environment


class TestFlaskCLI(TestCase):
    """Test Flask CLI Commands"""

    @classmethod
    def setUpClass(cls):
        """Writes one small synthetic corpus for every test"""
        app.logger.setLevel(logging.CRITICAL)
        cls.corpus = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        build_desk_corpus(cls.corpus.name, benign=6, malicious=6, seed=21)
        cls.benign = os.path.join(cls.corpus.name, "benign")
        cls.malicious = os.path.join(cls.corpus.name, "malicious")

    @classmethod
    def tearDownClass(cls):
        cls.corpus.cleanup()

    def setUp(self):
        self.runner = CliRunner()
        self.folder = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        self.workspace = os.path.join(self.folder.name, "workspace")
        self.environ = patch.dict(os.environ, {"FLASK_APP": "evasionlab:app"})
        self.environ.start()
        db.session.query(CorpusSample).delete()
        db.session.commit()

    def tearDown(self):
        self.environ.stop()
        self.folder.cleanup()
        db.session.remove()

    def invoke(self, command, *args):
        """Runs a command against the test workspace"""
        return self.runner.invoke(command, list(args) + ["--workspace", self.workspace])

    def ingest(self):
        """Ingests the shared corpus and extracts its features"""
        result = self.invoke(ingest_command, "--benign", self.benign, "--malicious", self.malicious)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        result = self.invoke(extract_command)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)

    @patch('evasionlab.common.cli_commands.db')
    def test_db_create(self, db_mock):
        """It should call the db-create command"""
        db_mock.return_value = MagicMock()
        result = self.runner.invoke(db_create)
        self.assertEqual(result.exit_code, 0)
        db_mock.create_all.assert_called_once()

    def test_synth_corpus(self):
        """It should write a synthetic corpus"""
        out_dir = os.path.join(self.folder.name, "corpus")
        result = self.runner.invoke(synth_corpus, [out_dir, "--benign", "2", "--malicious", "3", "--seed", "4"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(len(os.listdir(os.path.join(out_dir, "benign"))), 2)
        self.assertEqual(len(os.listdir(os.path.join(out_dir, "malicious"))), 3)

    def test_ingest(self):
        """It should write the manifest and fill the catalog"""
        self.ingest()
        with open(os.path.join(self.workspace, "manifest.json"), "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
        self.assertEqual(len(manifest["entries"]), 12)
        self.assertEqual(len(CorpusSample.all()), 12)
        self.assertEqual(len(CorpusSample.find_by_label("benign")), 6)
        frame = pd.read_csv(os.path.join(self.workspace, "features.csv"))
        self.assertEqual(len(frame), 12)
        self.assertEqual(sorted(frame["label"].unique().tolist()), [0, 1])

    def test_ingest_without_directories(self):
        """It should exit 2 without any corpus directory"""
        result = self.invoke(ingest_command)
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)
        result = self.invoke(ingest_command, "--benign", os.path.join(self.folder.name, "missing"))
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)

    def test_extract_without_manifest(self):
        """It should exit 2 when nothing was ingested"""
        result = self.invoke(extract_command)
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)
        self.assertIn("run ingest first", result.output)

    def test_build_dict(self):
        """It should build the benign dictionary"""
        self.ingest()
        result = self.invoke(build_dict)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("section buckets", result.output)
        with open(os.path.join(self.workspace, "dictionary.json"), "r", encoding="utf-8") as handle:
            data = json.load(handle)
        self.assertEqual(data["layout_digest"], feature_layout_digest())
        self.assertEqual(data["config_digest"], load_settings(self.workspace).digest())

    def test_train_detector(self):
        """It should train a detector and stamp the settings digest"""
        self.ingest()
        result = self.invoke(train_detector, "--kind", "random_forest", "--estimators", "3")
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("held-out AUC", result.output)
        with open(os.path.join(self.workspace, "models", "random_forest.json"), "r", encoding="utf-8") as handle:
            model = json.load(handle)
        self.assertEqual(model["n_estimators"], 3)
        self.assertEqual(model["training_meta"]["config_digest"], load_settings(self.workspace).digest())

    def test_train_detector_paths(self):
        """It should take the short kind names with explicit data and output paths"""
        self.ingest()
        out = os.path.join(self.folder.name, "rf.json")
        features = os.path.join(self.workspace, "features.csv")
        result = self.invoke(train_detector, "--kind", "rf", "--data", features, "--estimators", "2", "--out", out)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("random_forest: held-out AUC", result.output)
        with open(out, "r", encoding="utf-8") as handle:
            self.assertEqual(json.load(handle)["n_estimators"], 2)
        self.assertFalse(os.path.exists(os.path.join(self.workspace, "models", "random_forest.json")))

    def test_train_detector_bad_kind(self):
        """It should exit 2 on an unknown detector kind"""
        result = self.invoke(train_detector, "--kind", "svm")
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)

    def test_train_gan_paths(self):
        """It should train the GAN from explicit CSVs and black box into the given file"""
        self.ingest()
        blackbox = os.path.join(self.folder.name, "rf.json")
        out = os.path.join(self.folder.name, "gan.json")
        features = os.path.join(self.workspace, "features.csv")
        result = self.invoke(train_detector, "--kind", "rf", "--estimators", "2", "--out", blackbox)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        result = self.invoke(train_gan_command, "--benign", features, "--epochs", "1")
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)
        result = self.invoke(train_gan_command, "--benign", features, "--malicious", features,
                             "--blackbox", blackbox, "--out", out, "--epochs", "1")
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("the given malicious rows", result.output)
        self.assertTrue(os.path.exists(out))
        self.assertFalse(os.path.exists(os.path.join(self.workspace, "models", "gan.json")))

    @patch('evasionlab.common.cli_commands.save_policy')
    @patch('evasionlab.common.cli_commands.train_agent')
    @patch('evasionlab.common.cli_commands.load_environment')
    def test_train_agent_paths(self, environment_mock, train_mock, save_mock):
        """It should pass the explicit model, dictionary, samples and output paths through"""
        self.ingest()
        detector = os.path.join(self.folder.name, "rf.json")
        result = self.invoke(train_detector, "--kind", "rf", "--estimators", "2", "--out", detector)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        environment_mock.return_value = toy_environment()
        train_mock.return_value = (MagicMock(), [])
        with patch('evasionlab.common.cli_commands.detected', side_effect=lambda _m, _e, samples: list(samples)):
            result = self.invoke(
                train_agent_command, "--detector", detector, "--gan", "g.json", "--dict", "d.json",
                "--samples", self.malicious, "--out", "p.json",
            )
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertEqual(environment_mock.call_args[0][4:], ("g.json", "d.json"))
        _env, training, holdout, _config = train_mock.call_args[0]
        self.assertEqual(len(training) + len(holdout), 6)
        self.assertEqual(save_mock.call_args[0][1], "p.json")

    def test_layout_mismatch(self):
        """It should exit 3 on a model from another feature layout"""
        self.ingest()
        result = self.invoke(train_detector, "--kind", "random_forest", "--estimators", "2")
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        path = Path(self.workspace) / "models" / "random_forest.json"
        model = json.loads(path.read_text(encoding="utf-8"))
        model["layout_digest"] = "0" * 64
        path.write_text(json.dumps(model), encoding="utf-8")
        result = self.invoke(train_gan_command, "--epochs", "1")
        self.assertEqual(result.exit_code, status.EXIT_MISMATCH)

    def test_bad_settings(self):
        """It should exit 2 on an invalid settings file"""
        os.makedirs(self.workspace)
        with open(os.path.join(self.workspace, "evasionlab.env"), "w", encoding="utf-8") as handle:
            handle.write("MAX_STEPS=many\n")
        result = self.invoke(extract_command)
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)

    def test_transfer_without_mutants(self):
        """It should exit 2 when no mutant was written"""
        result = self.invoke(evaluate_transfer_command)
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)

    def test_report(self):
        """It should re-render a written report"""
        result = self.invoke(report)
        self.assertEqual(result.exit_code, status.EXIT_VALIDATION)
        evasion_report, traces = evaluate_actions([("m0001", malicious_pe())], toy_environment(), 1)
        write_report(os.path.join(self.workspace, "reports"), evasion_report, traces)
        result = self.invoke(report)
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("actions.csv", result.output)
