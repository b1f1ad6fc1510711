"""
Test cases for the black-box detectors

Test cases can be run with:
    nosetests
    coverage report -m
"""
import os
import json
import tempfile
from unittest import TestCase
import numpy as np
from evasionlab.detector import (
    BENIGN,
    GRADIENT_BOOSTING,
    MALICIOUS,
    RANDOM_FOREST,
    CorruptModel,
    Dataset,
    DecisionTree,
    DegenerateDataset,
    DetectorError,
    DuplicateSample,
    UnsupportedVersion,
    accuracy,
    evaluate_auc,
    load_model,
    load_model_file,
    model_digest,
    save_model,
    save_model_file,
    score,
    score_batch,
    train_gradient_boosting,
    train_random_forest,
)
from evasionlab.featurizer import FEATURE_DIM, DimensionMismatch, FeatureVector, feature_layout_digest
from evasionlab.synthetic import synthetic_dataset

SEED = 7


######################################################################
#  D A T A S E T
######################################################################
class TestDataset(TestCase):
    """Labelled feature rows"""

    def setUp(self):
        self.data = synthetic_dataset(40, 40, SEED)

    def test_shape(self):
        """It should hold one row, label and id per sample"""
        self.assertEqual(len(self.data), 80)
        self.assertEqual(self.data.X.shape, (80, FEATURE_DIM))
        self.assertEqual(self.data.class_counts(), (40, 40))
        self.assertTrue(set(np.unique(self.data.X)) <= {-0.5, 0.5})

    def test_duplicate_ids(self):
        """It should refuse two rows with the same sample id"""
        X = np.full((2, FEATURE_DIM), -0.5)
        self.assertRaises(DuplicateSample, Dataset, X, np.array([0, 1]), ("a", "a"))

    def test_dimension_mismatch(self):
        """It should refuse rows of the wrong width or ragged inputs"""
        self.assertRaises(DimensionMismatch, Dataset, np.zeros((2, 10)), np.array([0, 1]), ("a", "b"))
        self.assertRaises(DimensionMismatch, Dataset, np.zeros((2, FEATURE_DIM)), np.array([0]), ("a", "b"))

    def test_split(self):
        """It should split each class by the test fraction"""
        train, test = self.data.split(0.25, SEED)
        self.assertEqual(test.class_counts(), (10, 10))
        self.assertEqual(train.class_counts(), (30, 30))
        self.assertFalse(set(train.sample_ids) & set(test.sample_ids))
        again, _ = self.data.split(0.25, SEED)
        self.assertEqual(again.sample_ids, train.sample_ids)

    def test_split_ignores_row_order(self):
        """It should split the same way whatever the row order"""
        shuffled = self.data.take(np.random.default_rng(1).permutation(len(self.data)))
        self.assertEqual(shuffled.split(0.25, SEED)[1].sample_ids, self.data.split(0.25, SEED)[1].sample_ids)
        self.assertEqual(shuffled.digest(), self.data.digest())

    def test_with_label_and_stack(self):
        """It should select one class and stack datasets back together"""
        benign = self.data.with_label(BENIGN)
        malicious = self.data.with_label(MALICIOUS)
        self.assertEqual(benign.class_counts(), (40, 0))
        self.assertEqual(malicious.class_counts(), (0, 40))
        self.assertEqual(benign.stack(malicious).digest(), self.data.digest())

    def test_from_rows(self):
        """It should build a dataset from feature vectors"""
        bits = np.zeros(FEATURE_DIM)
        bits[5] = 1
        data = Dataset.from_rows([(FeatureVector.from_binary(bits), 1, "x"), (FeatureVector.empty(), 0, "y")])
        self.assertEqual(data.sample_ids, ("x", "y"))
        self.assertEqual(data.X[0, 5], 0.5)
        self.assertEqual(list(data.y), [1, 0])

    def test_csv(self):
        """It should write and read the feature CSV"""
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, "features.csv")
            self.data.to_csv(path)
            loaded = Dataset.from_csv(path)
        self.assertEqual(loaded.digest(), self.data.digest())
        self.assertEqual(loaded.sample_ids, self.data.sample_ids)


######################################################################
#  T R A I N I N G
######################################################################
class TestTraining(TestCase):
    """Random forest and gradient boosting"""

    @classmethod
    def setUpClass(cls):
        cls.train, cls.test = synthetic_dataset(200, 200, SEED).split(0.25, SEED)
        cls.forest = train_random_forest(cls.train, n_estimators=15, seed=SEED)
        cls.boosting = train_gradient_boosting(cls.train, n_estimators=25, seed=SEED)

    def test_forest_auc(self):
        """It should separate the synthetic classes with a random forest"""
        self.assertEqual(self.forest.kind, RANDOM_FOREST)
        self.assertEqual(len(self.forest.trees), 15)
        self.assertGreaterEqual(evaluate_auc(self.forest, self.test), 0.95)
        self.assertGreaterEqual(accuracy(self.forest, self.test), 0.85)

    def test_boosting_auc(self):
        """It should separate the synthetic classes with gradient boosting"""
        self.assertEqual(self.boosting.kind, GRADIENT_BOOSTING)
        self.assertGreaterEqual(evaluate_auc(self.boosting, self.test), 0.95)
        curve = self.boosting.training_meta["loss_curve"]
        self.assertEqual(len(curve), 25)
        self.assertLess(curve[-1], curve[0])

    def test_deterministic(self):
        """It should train the same model from the same seed and rows"""
        shuffled = self.train.take(np.random.default_rng(3).permutation(len(self.train)))
        again = train_random_forest(shuffled, n_estimators=15, seed=SEED)
        self.assertEqual(model_digest(again), model_digest(self.forest))
        other = train_random_forest(self.train, n_estimators=15, seed=SEED + 1)
        self.assertNotEqual(model_digest(other), model_digest(self.forest))

    def test_scores(self):
        """It should score probabilities in [0, 1]"""
        for model in (self.forest, self.boosting):
            scores = score_batch(model, self.test.X)
            self.assertEqual(scores.shape, (len(self.test),))
            self.assertTrue(np.all((scores >= 0.0) & (scores <= 1.0)))
            self.assertAlmostEqual(score(model, self.test.X[0]), scores[0])
            self.assertAlmostEqual(score(model, FeatureVector(self.test.X[1])), scores[1])

    def test_score_one_vector(self):
        """It should refuse a batch or a wrong width in score"""
        self.assertRaises(DimensionMismatch, score, self.forest, self.test.X[:2])
        self.assertRaises(DimensionMismatch, score_batch, self.forest, np.zeros((1, 17)))

    def test_degenerate_dataset(self):
        """It should refuse a training set with one class"""
        benign = self.train.with_label(BENIGN)
        self.assertRaises(DegenerateDataset, train_random_forest, benign, 3)
        self.assertRaises(DegenerateDataset, train_gradient_boosting, benign, 3)
        self.assertRaises(DegenerateDataset, evaluate_auc, self.forest, benign)
        self.assertTrue(issubclass(DegenerateDataset, DetectorError))

    def test_training_meta(self):
        """It should record the seed and the corpus digest"""
        self.assertEqual(self.forest.training_meta["seed"], SEED)
        self.assertEqual(self.forest.training_meta["corpus_digest"], self.train.digest())
        self.assertEqual(self.forest.serialize()["layout_digest"], feature_layout_digest())

    def test_leaf_tree(self):
        """It should predict the leaf value for every row"""
        tree = DecisionTree.leaf(0.25)
        np.testing.assert_array_equal(tree.predict(np.zeros((3, FEATURE_DIM))), [0.25, 0.25, 0.25])


######################################################################
#  P E R S I S T E N C E
######################################################################
class TestPersistence(TestCase):
    """Saving and loading models"""

    @classmethod
    def setUpClass(cls):
        cls.data = synthetic_dataset(30, 30, SEED)
        cls.model = train_gradient_boosting(cls.data, n_estimators=5, seed=SEED)

    def test_round_trip(self):
        """It should load a saved model that scores identically"""
        loaded = load_model(save_model(self.model))
        self.assertEqual(loaded, self.model)
        self.assertEqual(model_digest(loaded), model_digest(self.model))
        np.testing.assert_array_equal(score_batch(loaded, self.data.X), score_batch(self.model, self.data.X))

    def test_model_file(self):
        """It should write and read a model file"""
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, "gradient_boosting.json")
            save_model_file(self.model, path)
            self.assertEqual(load_model_file(path), self.model)

    def test_not_json(self):
        """It should refuse bytes that are not a model"""
        self.assertRaises(CorruptModel, load_model, b"\x00\x01 not json")
        self.assertRaises(CorruptModel, load_model, b"[1, 2]")

    def test_unsupported_version(self):
        """It should refuse an unknown model version"""
        data = json.loads(save_model(self.model))
        data["version"] = 99
        self.assertRaises(UnsupportedVersion, load_model, json.dumps(data).encode())

    def test_bad_trees(self):
        """It should refuse trees that split outside the feature range"""
        data = json.loads(save_model(self.model))
        data["trees"][0]["feature"][0] = FEATURE_DIM
        self.assertRaises(CorruptModel, load_model, json.dumps(data).encode())
        data = json.loads(save_model(self.model))
        data["trees"] = data["trees"][1:]
        self.assertRaises(CorruptModel, load_model, json.dumps(data).encode())
        data = json.loads(save_model(self.model))
        del data["kind"]
        self.assertRaises(CorruptModel, load_model, json.dumps(data).encode())
