"""
Detector

Black-box scoring models over the 518 dimension feature vector: a class
weighted random forest and a logistic gradient boosting model. Both are
ensembles of presence-test trees (split threshold 0 on +-0.5 features) and
share one scoring and persistence interface.
"""
import json
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np
from sklearn.metrics import roc_auc_score

from evasionlab.common.seeds import rng_for
from evasionlab.featurizer import (
    FEATURE_DIM,
    DimensionMismatch,
    FeatureVector,
    features_frame,
    feature_layout_digest,
    read_feature_csv,
    write_feature_csv,
)

logger = logging.getLogger("flask.app")

MODEL_VERSION = 1
RANDOM_FOREST = "random_forest"
GRADIENT_BOOSTING = "gradient_boosting"
KINDS = (RANDOM_FOREST, GRADIENT_BOOSTING)

BENIGN = 0
MALICIOUS = 1

LEAF = -1
SPLIT_THRESHOLD = 0.0
NEWTON_LAMBDA = 1.0
MIN_GAIN = 1e-12


class DetectorError(Exception):
    """Base class for detector errors"""


class DegenerateDataset(DetectorError):
    """Used when a training set lacks one of the classes"""


class DuplicateSample(DetectorError):
    """Used when two rows share a sample id"""


class UnsupportedVersion(DetectorError):
    """Used when a model file has an unknown version"""


class CorruptModel(DetectorError):
    """Used when a model file cannot be decoded"""


######################################################################
#  D A T A S E T
######################################################################
@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows with labels and unique sample ids"""

    X: np.ndarray
    y: np.ndarray
    sample_ids: Tuple[str, ...]
    split_seed: int = 0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.size == 0:
            X = np.zeros((0, FEATURE_DIM))
        if X.ndim != 2:
            raise DimensionMismatch(f"expected a 2-d feature matrix, got {X.ndim} dimensions")
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if X.shape[1] != FEATURE_DIM:
            raise DimensionMismatch(f"expected {FEATURE_DIM} columns, got {X.shape[1]}")
        if len(X) != len(y) or len(y) != len(self.sample_ids):
            raise DimensionMismatch("rows, labels and sample ids differ in length")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DuplicateSample("sample ids must be unique")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_rows(cls, rows: Iterable[Tuple[FeatureVector, int, str]], split_seed: int = 0) -> "Dataset":
        """Builds a dataset from (vector, label, sample_id) rows"""
        rows = list(rows)
        X = np.array([vector.values for vector, _, _ in rows]).reshape(len(rows), FEATURE_DIM)
        return cls(X, np.array([label for _, label, _ in rows]), tuple(s for _, _, s in rows), split_seed)

    @classmethod
    def from_csv(cls, path, split_seed: int = 0) -> "Dataset":
        """Reads a feature CSV"""
        X, y, ids = read_feature_csv(path)
        return cls(X, y, tuple(ids), split_seed)

    def to_csv(self, path) -> None:
        """Writes the feature CSV"""
        rows = [(FeatureVector(x), int(label), sid) for x, label, sid in zip(self.X, self.y, self.sample_ids)]
        write_feature_csv(path, features_frame(rows))

    def canonical(self) -> "Dataset":
        """Rows sorted by sample id"""
        order = sorted(range(len(self)), key=lambda i: self.sample_ids[i])
        return self.take(order)

    def take(self, indices: Sequence[int]) -> "Dataset":
        """A dataset of the given rows"""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[indices], self.y[indices], tuple(self.sample_ids[i] for i in indices), self.split_seed)

    def with_label(self, label: int) -> "Dataset":
        """The rows of one class"""
        return self.take(np.flatnonzero(self.y == label))

    def stack(self, other: "Dataset") -> "Dataset":
        """Rows of both datasets"""
        return Dataset(
            np.vstack([self.X, other.X]),
            np.concatenate([self.y, other.y]),
            self.sample_ids + other.sample_ids,
            self.split_seed,
        )

    def split(self, test_fraction: float = 0.25, seed: Optional[int] = None) -> Tuple["Dataset", "Dataset"]:
        """Stratified, seeded train/test split over the canonical order"""
        base = self.canonical()
        rng = rng_for(self.split_seed if seed is None else seed, "split")
        train, test = [], []
        for label in (BENIGN, MALICIOUS):
            members = np.flatnonzero(base.y == label)
            members = members[rng.permutation(len(members))]
            cut = int(round(len(members) * test_fraction))
            test.extend(members[:cut].tolist())
            train.extend(members[cut:].tolist())
        return base.take(sorted(train)), base.take(sorted(test))

    def class_counts(self) -> Tuple[int, int]:
        """(benign, malicious) row counts"""
        return int(np.sum(self.y == BENIGN)), int(np.sum(self.y == MALICIOUS))

    def digest(self) -> str:
        """sha256 over the canonical rows"""
        base = self.canonical()
        hasher = hashlib.sha256()
        hasher.update((base.X > 0).astype(np.uint8).tobytes())
        hasher.update(base.y.astype(np.int64).tobytes())
        hasher.update("\n".join(base.sample_ids).encode("utf-8"))
        return hasher.hexdigest()


######################################################################
#  T R E E S
######################################################################
@dataclass(frozen=True)
class DecisionTree:
    """A flat binary tree; node 0 is the root, feature -1 marks a leaf"""

    feature: Tuple[int, ...]
    threshold: Tuple[float, ...]
    left: Tuple[int, ...]
    right: Tuple[int, ...]
    value: Tuple[float, ...]

    @classmethod
    def leaf(cls, value: float) -> "DecisionTree":
        """A single leaf tree"""
        return cls((LEAF,), (SPLIT_THRESHOLD,), (LEAF,), (LEAF,), (float(value),))

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Leaf value reached by every row of X"""
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        nodes = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            inner = feature[nodes] != LEAF
            if not inner.any():
                break
            at = nodes[inner]
            go_right = X[rows[inner], feature[at]] > threshold[at]
            nodes[inner] = np.where(go_right, right[at], left[at])
        return np.asarray(self.value)[nodes]

    def serialize(self) -> dict:
        """Serializes a tree into a dictionary"""
        return {
            "feature": list(self.feature),
            "threshold": list(self.threshold),
            "left": list(self.left),
            "right": list(self.right),
            "value": list(self.value),
        }


class _TreeBuilder:
    """Grows one tree breadth first into flat arrays"""

    def __init__(self):
        self.feature: List[int] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def add(self, value: float) -> int:
        self.feature.append(LEAF)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(float(value))
        return len(self.value) - 1

    def split(self, node: int, feature: int, left_value: float, right_value: float) -> Tuple[int, int]:
        self.feature[node] = int(feature)
        self.left[node] = self.add(left_value)
        self.right[node] = self.add(right_value)
        return self.left[node], self.right[node]

    def build(self) -> DecisionTree:
        return DecisionTree(
            tuple(self.feature),
            tuple(SPLIT_THRESHOLD for _ in self.feature),
            tuple(self.left),
            tuple(self.right),
            tuple(self.value),
        )


def _best_feature(scores: np.ndarray, valid: np.ndarray, features: np.ndarray) -> Optional[int]:
    """Lowest feature index among the best valid scores"""
    if not valid.any():
        return None
    masked = np.where(valid, scores, -np.inf)
    best = masked.max()
    if best <= MIN_GAIN:
        return None
    winners = features[np.isclose(masked, best, rtol=0.0, atol=1e-12) & valid]
    return int(winners.min())


def _gini_mass(positive: np.ndarray, negative: np.ndarray) -> np.ndarray:
    total = positive + negative
    with np.errstate(divide="ignore", invalid="ignore"):
        mass = np.where(total > 0, 2.0 * positive * negative / total, 0.0)
    return mass


def _grow_forest_tree(present: np.ndarray, y: np.ndarray, weights: np.ndarray, max_depth: int,
                      max_features: int, rng: np.random.Generator) -> DecisionTree:
    builder = _TreeBuilder()
    wy = weights * y
    wn = weights * (1 - y)
    rows = np.flatnonzero(weights > 0)
    queue = [(builder.add(_malicious_fraction(wy, wn, rows)), rows, 0)]
    all_features = np.arange(FEATURE_DIM)
    while queue:
        node, rows, depth = queue.pop(0)
        pos, neg = wy[rows].sum(), wn[rows].sum()
        if depth >= max_depth or len(rows) < 2 or pos == 0 or neg == 0:
            continue
        parent = float(_gini_mass(np.array([pos]), np.array([neg]))[0])
        sampled = np.sort(rng.choice(FEATURE_DIM, size=max_features, replace=False))
        choice = _forest_split(present, rows, wy, wn, pos, neg, parent, sampled)
        if choice is None and max_features < FEATURE_DIM:
            choice = _forest_split(present, rows, wy, wn, pos, neg, parent, np.setdiff1d(all_features, sampled))
        if choice is None:
            continue
        mask = present[rows, choice]
        left_rows, right_rows = rows[~mask], rows[mask]
        left, right = builder.split(node, choice, _malicious_fraction(wy, wn, left_rows),
                                    _malicious_fraction(wy, wn, right_rows))
        queue.append((left, left_rows, depth + 1))
        queue.append((right, right_rows, depth + 1))
    return builder.build()


def _malicious_fraction(wy: np.ndarray, wn: np.ndarray, rows: np.ndarray) -> float:
    pos, neg = wy[rows].sum(), wn[rows].sum()
    return float(pos / (pos + neg)) if pos + neg > 0 else 0.0


def _forest_split(present, rows, wy, wn, pos, neg, parent, features) -> Optional[int]:
    block = present[np.ix_(rows, features)].astype(np.float64)
    right_pos = wy[rows] @ block
    right_neg = wn[rows] @ block
    right_count = block.sum(axis=0)
    left_pos, left_neg = pos - right_pos, neg - right_neg
    gain = parent - _gini_mass(left_pos, left_neg) - _gini_mass(right_pos, right_neg)
    valid = (right_count > 0) & (right_count < len(rows))
    return _best_feature(gain, valid, features)


def _grow_boosting_tree(present: np.ndarray, grad: np.ndarray, hess: np.ndarray, max_depth: int,
                        learning_rate: float) -> DecisionTree:
    builder = _TreeBuilder()

    def leaf_value(rows):
        return -learning_rate * grad[rows].sum() / (hess[rows].sum() + NEWTON_LAMBDA)

    rows = np.arange(len(grad))
    queue = [(builder.add(leaf_value(rows)), rows, 0)]
    features = np.arange(FEATURE_DIM)
    while queue:
        node, rows, depth = queue.pop(0)
        if depth >= max_depth or len(rows) < 2:
            continue
        g_total, h_total = grad[rows].sum(), hess[rows].sum()
        block = present[rows].astype(np.float64)
        g_right = grad[rows] @ block
        h_right = hess[rows] @ block
        right_count = block.sum(axis=0)
        g_left, h_left = g_total - g_right, h_total - h_right
        gain = (
            g_left ** 2 / (h_left + NEWTON_LAMBDA)
            + g_right ** 2 / (h_right + NEWTON_LAMBDA)
            - g_total ** 2 / (h_total + NEWTON_LAMBDA)
        )
        valid = (right_count > 0) & (right_count < len(rows))
        choice = _best_feature(gain, valid, features)
        if choice is None:
            continue
        mask = present[rows, choice]
        left_rows, right_rows = rows[~mask], rows[mask]
        left, right = builder.split(node, choice, leaf_value(left_rows), leaf_value(right_rows))
        queue.append((left, left_rows, depth + 1))
        queue.append((right, right_rows, depth + 1))
    return builder.build()


######################################################################
#  M O D E L
######################################################################
@dataclass(frozen=True)
class DetectorModel:
    """A trained tree ensemble"""

    kind: str
    trees: Tuple[DecisionTree, ...]
    n_estimators: int
    learning_rate: float = 0.0
    base_score: float = 0.0
    params: dict = field(default_factory=dict)
    training_meta: dict = field(default_factory=dict)

    def serialize(self) -> dict:
        """Serializes a model into its versioned dictionary form"""
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "n_estimators": self.n_estimators,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "params": self.params,
            "training_meta": self.training_meta,
            "layout_digest": feature_layout_digest(),
            "trees": [tree.serialize() for tree in self.trees],
        }


def _class_weights(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y, minlength=2).astype(np.float64)
    return (len(y) / (2.0 * counts))[y]


def _check_trainable(data: Dataset) -> None:
    benign, malicious = data.class_counts()
    if benign < 2 or malicious < 2:
        raise DegenerateDataset(f"need two rows per class, got {benign} benign and {malicious} malicious")


def train_random_forest(data: Dataset, n_estimators: int = 100, seed: int = 0, max_depth: int = 16,
                        max_features: int = 0) -> DetectorModel:
    """Trains a class weighted random forest

    Bootstrap rows and per-node feature subsets come only from seed, over
    the rows sorted by sample id.
    """
    _check_trainable(data)
    data = data.canonical()
    present = data.X > 0
    class_weight = _class_weights(data.y)
    features = max_features or int(np.sqrt(FEATURE_DIM))
    logger.info("Training random forest: %d trees on %d rows", n_estimators, len(data))

    trees = []
    for index in range(n_estimators):
        rng = rng_for(seed, "random_forest", index)
        counts = np.bincount(rng.integers(0, len(data), len(data)), minlength=len(data))
        trees.append(_grow_forest_tree(present, data.y, class_weight * counts, max_depth, features, rng))
    return DetectorModel(
        kind=RANDOM_FOREST,
        trees=tuple(trees),
        n_estimators=n_estimators,
        params={"max_depth": max_depth, "max_features": features},
        training_meta={"seed": seed, "feature_dim": FEATURE_DIM, "corpus_digest": data.digest()},
    )


def train_gradient_boosting(data: Dataset, n_estimators: int = 100, learning_rate: float = 0.1,
                            max_depth: int = 6, seed: int = 0) -> DetectorModel:
    """Trains a logistic gradient boosting model with Newton leaf values"""
    _check_trainable(data)
    data = data.canonical()
    present = data.X > 0
    y = data.y.astype(np.float64)
    weights = _class_weights(data.y)
    prior = float(np.sum(weights * y) / np.sum(weights))
    base = float(np.log(prior / (1.0 - prior)))
    logger.info("Training gradient boosting: %d rounds on %d rows", n_estimators, len(data))

    margin = np.full(len(data), base)
    trees = []
    losses = []
    for _ in range(n_estimators):
        p = _sigmoid(margin)
        tree = _grow_boosting_tree(present, weights * (p - y), weights * p * (1.0 - p), max_depth, learning_rate)
        margin = margin + tree.predict(data.X)
        trees.append(tree)
        losses.append(_weighted_log_loss(y, margin, weights))
    return DetectorModel(
        kind=GRADIENT_BOOSTING,
        trees=tuple(trees),
        n_estimators=n_estimators,
        learning_rate=learning_rate,
        base_score=base,
        params={"max_depth": max_depth, "lambda": NEWTON_LAMBDA},
        training_meta={
            "seed": seed,
            "feature_dim": FEATURE_DIM,
            "corpus_digest": data.digest(),
            "loss_curve": losses,
        },
    )


def _sigmoid(margin: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * margin))


def _weighted_log_loss(y: np.ndarray, margin: np.ndarray, weights: np.ndarray) -> float:
    # log(1 + e^m) - y m, computed stably
    losses = np.logaddexp(0.0, margin) - y * margin
    return float(np.sum(weights * losses) / np.sum(weights))


def _as_matrix(X: Union[FeatureVector, np.ndarray, Sequence]) -> np.ndarray:
    if isinstance(X, FeatureVector):
        return X.values.reshape(1, FEATURE_DIM)
    matrix = np.asarray(X, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.shape[1] != FEATURE_DIM:
        raise DimensionMismatch(f"expected {FEATURE_DIM} features, got {matrix.shape[1]}")
    return matrix


def score_batch(model: DetectorModel, X) -> np.ndarray:
    """Maliciousness probabilities for every row of X"""
    matrix = _as_matrix(X)
    if model.kind == RANDOM_FOREST:
        votes = np.zeros(len(matrix))
        for tree in model.trees:
            votes += tree.predict(matrix)
        return np.clip(votes / max(len(model.trees), 1), 0.0, 1.0)
    margin = np.full(len(matrix), model.base_score)
    for tree in model.trees:
        margin += tree.predict(matrix)
    return _sigmoid(margin)


def score(model: DetectorModel, x) -> float:
    """Maliciousness probability of one vector"""
    matrix = _as_matrix(x)
    if len(matrix) != 1:
        raise DimensionMismatch("score takes one vector; use score_batch")
    return float(score_batch(model, matrix)[0])


def evaluate_auc(model: DetectorModel, data: Dataset) -> float:
    """ROC AUC of the model on a labelled dataset"""
    _require_both_classes(data)
    return float(roc_auc_score(data.y, score_batch(model, data.X)))


def _require_both_classes(data: Dataset) -> None:
    benign, malicious = data.class_counts()
    if not benign or not malicious:
        raise DegenerateDataset("AUC needs both classes")


def accuracy(model: DetectorModel, data: Dataset, threshold: float = 0.5) -> float:
    """Fraction of rows classified correctly at threshold"""
    predicted = (score_batch(model, data.X) >= threshold).astype(np.int64)
    return float(np.mean(predicted == data.y))


######################################################################
#  P E R S I S T E N C E
######################################################################
def save_model(model: DetectorModel) -> bytes:
    """Canonical JSON bytes of a model"""
    return json.dumps(model.serialize(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def load_model(payload: bytes) -> DetectorModel:
    """Decodes bytes written by save_model"""
    try:
        data = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as error:
        raise CorruptModel(f"model is not valid JSON: {error}") from error
    if not isinstance(data, dict):
        raise CorruptModel("model must be a JSON object")
    if data.get("version") != MODEL_VERSION:
        raise UnsupportedVersion(f"unsupported model version {data.get('version')!r}")
    try:
        trees = tuple(_load_tree(tree) for tree in data["trees"])
        model = DetectorModel(
            kind=data["kind"],
            trees=trees,
            n_estimators=int(data["n_estimators"]),
            learning_rate=float(data["learning_rate"]),
            base_score=float(data["base_score"]),
            params=dict(data["params"]),
            training_meta=dict(data["training_meta"]),
        )
    except (KeyError, TypeError, ValueError) as error:
        raise CorruptModel(f"model is missing or has invalid fields: {error}") from error
    if model.kind not in KINDS or len(model.trees) != model.n_estimators:
        raise CorruptModel("model kind or tree count is invalid")
    return model


def _load_tree(data: dict) -> DecisionTree:
    tree = DecisionTree(
        feature=tuple(int(f) for f in data["feature"]),
        threshold=tuple(float(t) for t in data["threshold"]),
        left=tuple(int(i) for i in data["left"]),
        right=tuple(int(i) for i in data["right"]),
        value=tuple(float(v) for v in data["value"]),
    )
    size = len(tree.value)
    if not size or any(len(part) != size for part in (tree.feature, tree.threshold, tree.left, tree.right)):
        raise CorruptModel("tree arrays differ in length")
    for node in range(size):
        if tree.feature[node] == LEAF:
            continue
        if not 0 <= tree.feature[node] < FEATURE_DIM:
            raise CorruptModel(f"split feature {tree.feature[node]} is out of range")
        if not (node < tree.left[node] < size and node < tree.right[node] < size):
            raise CorruptModel("tree children must follow their parent")
    if not np.all(np.isfinite(tree.value)):
        raise CorruptModel("leaf values must be finite")
    return tree


def save_model_file(model: DetectorModel, path) -> None:
    """Writes a model file"""
    with open(path, "wb") as handle:
        handle.write(save_model(model))


def load_model_file(path) -> DetectorModel:
    """Reads a model file"""
    with open(path, "rb") as handle:
        return load_model(handle.read())


def model_digest(model: DetectorModel) -> str:
    """sha256 of the canonical serialization"""
    return hashlib.sha256(save_model(model)).hexdigest()
