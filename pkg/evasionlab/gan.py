"""
Adversarial feature generator

A generator turns a malicious presence vector plus Bernoulli noise into an
add-only adversarial vector; a discriminator learns to imitate the frozen
random forest black box and hands its gradient to the generator.

Both networks are two layer numpy MLPs (tanh hidden, sigmoid output) with
hand-written backpropagation. The binarization of the generator output
is passed straight through during training.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import numpy as np

from evasionlab.common.seeds import rng_for
from evasionlab.detector import RANDOM_FOREST, Dataset, DetectorModel, score_batch
from evasionlab.featurizer import FEATURE_DIM, DimensionMismatch, FeatureVector, feature_layout_digest

logger = logging.getLogger("flask.app")

GAN_VERSION = 1
GENERATOR_HIDDEN = 512
DISCRIMINATOR_HIDDEN = 256
GENERATOR_OUTPUT_BIAS = -2.0
FINITE_DIFFERENCE_STEP = 1e-4


class GanError(Exception):
    """Base class for GAN errors"""


class EmptySlice(GanError):
    """Used when the benign or malicious training slice is empty"""


class NonFiniteLoss(GanError):
    """Used when a loss stops being finite"""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def noise(rng: np.random.Generator, noise_dim: int, rows: Optional[int] = None) -> np.ndarray:
    """Bernoulli(0.5) noise as 0/1 floats"""
    shape = noise_dim if rows is None else (rows, noise_dim)
    return rng.integers(0, 2, size=shape).astype(np.float64)


######################################################################
#  N E T W O R K S
######################################################################
@dataclass(eq=False)
class Mlp:
    """input -> tanh hidden -> one linear output layer (logits)"""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def initialize(cls, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator,
                   output_bias: float = 0.0) -> "Mlp":
        """Glorot uniform weights, zero hidden bias"""
        limit1 = np.sqrt(6.0 / (fan_in + hidden))
        limit2 = np.sqrt(6.0 / (hidden + fan_out))
        return cls(
            rng.uniform(-limit1, limit1, size=(fan_in, hidden)),
            np.zeros(hidden),
            rng.uniform(-limit2, limit2, size=(hidden, fan_out)),
            np.full(fan_out, float(output_bias)),
        )

    @property
    def params(self) -> List[np.ndarray]:
        """Parameter arrays, updated in place by optimizers"""
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(inputs, hidden, outputs)"""
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (hidden activations, output logits)"""
        hidden = np.tanh(inputs @ self.w1 + self.b1)
        return hidden, hidden @ self.w2 + self.b2

    def backward(self, inputs: np.ndarray, hidden: np.ndarray, d_logits: np.ndarray):
        """Returns (parameter gradients, gradient with respect to the inputs)"""
        d_hidden = (d_logits @ self.w2.T) * (1.0 - hidden ** 2)
        grads = [inputs.T @ d_hidden, d_hidden.sum(axis=0), hidden.T @ d_logits, d_logits.sum(axis=0)]
        return grads, d_hidden @ self.w1.T

    def is_finite(self) -> bool:
        """True when every weight is finite"""
        return all(np.all(np.isfinite(p)) for p in self.params)

    def serialize(self) -> dict:
        """Serializes the network into a dictionary"""
        return {
            "layers": [
                {"weight": self.w1.tolist(), "bias": self.b1.tolist()},
                {"weight": self.w2.tolist(), "bias": self.b2.tolist()},
            ]
        }

    @classmethod
    def deserialize(cls, data: dict) -> "Mlp":
        """Rebuilds a network from its dictionary form"""
        first, second = data["layers"]
        return cls(
            np.array(first["weight"], dtype=np.float64),
            np.array(first["bias"], dtype=np.float64),
            np.array(second["weight"], dtype=np.float64),
            np.array(second["bias"], dtype=np.float64),
        )


class Sgd:
    """Plain stochastic gradient descent"""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def update(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        for param, grad in zip(params, grads):
            param -= self.learning_rate * grad


class Adam:
    """Adam with the usual defaults"""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self.moments: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def update(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        self.steps += 1
        for index, (param, grad) in enumerate(zip(params, grads)):
            first, second = self.moments.get(index, (np.zeros_like(param), np.zeros_like(param)))
            first = self.beta1 * first + (1.0 - self.beta1) * grad
            second = self.beta2 * second + (1.0 - self.beta2) * grad ** 2
            self.moments[index] = (first, second)
            corrected1 = first / (1.0 - self.beta1 ** self.steps)
            corrected2 = second / (1.0 - self.beta2 ** self.steps)
            param -= self.learning_rate * corrected1 / (np.sqrt(corrected2) + self.epsilon)


OPTIMIZERS = {"sgd": Sgd, "adam": Adam}


@dataclass(eq=False)
class GanModel:
    """Generator, discriminator and the settings they were trained with"""

    generator: Mlp
    discriminator: Mlp
    noise_dim: int
    train_meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, noise_dim: int = 64, seed: int = 0) -> "GanModel":
        """A fresh model; the generator output bias keeps untrained additions rare"""
        rng = rng_for(seed, "gan", "init")
        generator = Mlp.initialize(FEATURE_DIM + noise_dim, GENERATOR_HIDDEN, FEATURE_DIM, rng,
                                   GENERATOR_OUTPUT_BIAS)
        discriminator = Mlp.initialize(FEATURE_DIM, DISCRIMINATOR_HIDDEN, 1, rng)
        return cls(generator, discriminator, noise_dim, {"seed": seed, "epochs": 0})

    def serialize(self) -> dict:
        """Serializes the model into its versioned dictionary form"""
        return {
            "version": GAN_VERSION,
            "noise_dim": self.noise_dim,
            "layout_digest": feature_layout_digest(),
            "generator": self.generator.serialize(),
            "discriminator": self.discriminator.serialize(),
            "train_meta": self.train_meta,
        }

    @classmethod
    def deserialize(cls, data: dict) -> "GanModel":
        """Rebuilds a model, checking the layer shapes"""
        if data.get("version") != GAN_VERSION:
            raise GanError(f"unsupported GAN version {data.get('version')!r}")
        model = cls(
            Mlp.deserialize(data["generator"]),
            Mlp.deserialize(data["discriminator"]),
            int(data["noise_dim"]),
            dict(data.get("train_meta", {})),
        )
        if model.generator.shape != (FEATURE_DIM + model.noise_dim, GENERATOR_HIDDEN, FEATURE_DIM) or \
                model.discriminator.shape != (FEATURE_DIM, DISCRIMINATOR_HIDDEN, 1):
            raise GanError("GAN layer shapes do not match the feature layout")
        return model

    def save(self, path) -> None:
        """Writes the JSON model file"""
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.serialize(), handle, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GanModel":
        """Reads a model file written by save"""
        with open(path, "r", encoding="utf-8") as handle:
            return cls.deserialize(json.load(handle))


######################################################################
#  G E N E R A T I O N
######################################################################
def generator_outputs(model: GanModel, bits: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Generator probabilities for 0/1 input rows and noise rows"""
    inputs = np.hstack([np.atleast_2d(bits), np.atleast_2d(z)])
    _, logits = model.generator.forward(inputs)
    return _sigmoid(logits)


def generate_batch(model: GanModel, bits: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Adversarial 0/1 rows: input OR thresholded generator output"""
    bits = np.atleast_2d(bits).astype(np.float64)
    z = np.atleast_2d(z).astype(np.float64)
    if bits.shape[1] != FEATURE_DIM or z.shape[1] != model.noise_dim or len(bits) != len(z):
        raise DimensionMismatch(f"expected rows of {FEATURE_DIM} bits and {model.noise_dim} noise values")
    return np.maximum(bits, (generator_outputs(model, bits, z) > 0.5).astype(np.float64))


def generate_adversarial_features(model: GanModel, x: FeatureVector, z: np.ndarray) -> FeatureVector:
    """The add-only adversarial version of x"""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.noise_dim,):
        raise DimensionMismatch(f"noise must have {model.noise_dim} values")
    return FeatureVector.from_binary(generate_batch(model, x.binary(), z)[0])


def _encode(bits: np.ndarray) -> np.ndarray:
    return bits - 0.5


######################################################################
#  L O S S E S
######################################################################
def discriminator_loss(model: GanModel, inputs: np.ndarray, targets: np.ndarray):
    """Mean binary cross entropy of the discriminator and its gradients"""
    hidden, logits = model.discriminator.forward(inputs)
    logits = logits[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))
    d_logits = ((_sigmoid(logits) - targets) / len(targets)).reshape(-1, 1)
    grads, _ = model.discriminator.backward(inputs, hidden, d_logits)
    return loss, grads


def generator_loss(model: GanModel, bits: np.ndarray, z: np.ndarray, relaxed: bool = False):
    """Mean -log(1 - D(adv)) and the generator gradients

    The adversarial rows are the thresholded OR (straight-through) or, when
    relaxed, the continuous OR b + (1 - b) * o, which has the same gradient.
    """
    inputs = np.hstack([bits, z])
    g_hidden, g_logits = model.generator.forward(inputs)
    outputs = _sigmoid(g_logits)
    if relaxed:
        adversarial = bits + (1.0 - bits) * outputs
    else:
        adversarial = np.maximum(bits, (outputs > 0.5).astype(np.float64))
    d_hidden, d_logits = model.discriminator.forward(adversarial)
    d_logits = d_logits[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, d_logits)))
    d_out = (_sigmoid(d_logits) / len(bits)).reshape(-1, 1)
    _, d_adversarial = model.discriminator.backward(adversarial, d_hidden, d_out)
    d_outputs = d_adversarial * (1.0 - bits)
    grads, _ = model.generator.backward(inputs, g_hidden, d_outputs * outputs * (1.0 - outputs))
    return loss, grads


######################################################################
#  T R A I N I N G
######################################################################
def train_gan(benign: Dataset, malicious: Dataset, blackbox: DetectorModel, epochs: int = 100,
              batch_size: int = 32, learning_rate: float = 1e-3, noise_dim: int = 64, seed: int = 0,
              optimizer: str = "sgd") -> GanModel:
    """Trains the generator against a frozen random forest

    Each batch first fits the discriminator to the black-box labels of benign
    rows and freshly generated adversarial rows, then moves the generator to
    lower the discriminator's maliciousness estimate.
    """
    if not len(benign) or not len(malicious):
        raise EmptySlice("both the benign and the malicious slices need rows")
    if blackbox.kind != RANDOM_FOREST:
        raise GanError(f"the black box must be a {RANDOM_FOREST}, got {blackbox.kind}")
    if optimizer not in OPTIMIZERS:
        raise GanError(f"unknown optimizer {optimizer!r}")

    model = GanModel.initialize(noise_dim, seed)
    benign_bits = (benign.canonical().X > 0).astype(np.float64)
    malicious_bits = (malicious.canonical().X > 0).astype(np.float64)
    benign_labels = (score_batch(blackbox, _encode(benign_bits)) >= 0.5).astype(np.float64)
    g_optimizer = OPTIMIZERS[optimizer](learning_rate)
    d_optimizer = OPTIMIZERS[optimizer](learning_rate)
    rng = rng_for(seed, "gan", "train")
    d_losses, g_losses = [], []
    logger.info("Training GAN: %d epochs, %d malicious and %d benign rows", epochs, len(malicious), len(benign))

    for epoch in range(epochs):
        order = rng.permutation(len(malicious_bits))
        d_epoch, g_epoch = [], []
        for start in range(0, len(order), batch_size):
            bits = malicious_bits[order[start:start + batch_size]]
            z = noise(rng, noise_dim, len(bits))
            picked = rng.integers(0, len(benign_bits), size=len(bits))

            adversarial = generate_batch(model, bits, z)
            adversarial_labels = (score_batch(blackbox, _encode(adversarial)) >= 0.5).astype(np.float64)
            inputs = np.vstack([adversarial, benign_bits[picked]])
            targets = np.concatenate([adversarial_labels, benign_labels[picked]])
            d_loss, d_grads = discriminator_loss(model, inputs, targets)
            d_optimizer.update(model.discriminator.params, d_grads)

            g_loss, g_grads = generator_loss(model, bits, z)
            g_optimizer.update(model.generator.params, g_grads)
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                raise NonFiniteLoss(epoch, "GAN loss is not finite")
            d_epoch.append(d_loss)
            g_epoch.append(g_loss)

        d_losses.append(float(np.mean(d_epoch)))
        g_losses.append(float(np.mean(g_epoch)))
        if not (model.generator.is_finite() and model.discriminator.is_finite()):
            raise NonFiniteLoss(epoch, "GAN weights are not finite")
        logger.debug("GAN epoch %d: discriminator %.4f generator %.4f", epoch, d_losses[-1], g_losses[-1])

    model.train_meta = {
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "learning_rate": learning_rate,
        "optimizer": optimizer,
        "discriminator_losses": d_losses,
        "generator_losses": g_losses,
        "blackbox_digest": blackbox.training_meta.get("corpus_digest", ""),
    }
    if epochs:
        logger.info("GAN trained: final discriminator loss %.4f, generator loss %.4f", d_losses[-1], g_losses[-1])
    return model


def evasion_rate(model: GanModel, malicious: Dataset, blackbox: DetectorModel, seed: int = 0) -> float:
    """Fraction of adversarial rows the black box scores below 0.5"""
    bits = (malicious.canonical().X > 0).astype(np.float64)
    z = noise(rng_for(seed, "gan", "evaluate"), model.noise_dim, len(bits))
    scores = score_batch(blackbox, _encode(generate_batch(model, bits, z)))
    return float(np.mean(scores < 0.5))


######################################################################
#  G R A D I E N T   C H E C K
######################################################################
@dataclass(frozen=True, eq=False)
class GanBatch:
    """A small batch for gradient checking"""

    malicious: np.ndarray
    noise: np.ndarray
    discriminator_inputs: np.ndarray
    discriminator_targets: np.ndarray


def random_batch(model: GanModel, rows: int = 4, seed: int = 0) -> GanBatch:
    """A random batch of 0/1 rows"""
    rng = rng_for(seed, "gan", "gradient-check")
    return GanBatch(
        malicious=rng.integers(0, 2, size=(rows, FEATURE_DIM)).astype(np.float64),
        noise=noise(rng, model.noise_dim, rows),
        discriminator_inputs=rng.integers(0, 2, size=(2 * rows, FEATURE_DIM)).astype(np.float64),
        discriminator_targets=rng.integers(0, 2, size=2 * rows).astype(np.float64),
    )


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)


def gradient_check(model: GanModel, batch: GanBatch, coordinates: int = 12, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients

    Checks sampled coordinates of every parameter of both networks. The
    generator is checked through the continuous relaxation of the OR.
    """
    rng = rng_for(seed, "gan", "coordinates")

    def d_loss():
        return discriminator_loss(model, batch.discriminator_inputs, batch.discriminator_targets)

    def g_loss():
        return generator_loss(model, batch.malicious, batch.noise, relaxed=True)

    worst = 0.0
    for network, loss in ((model.discriminator, d_loss), (model.generator, g_loss)):
        _, analytic = loss()
        for param, grad in zip(network.params, analytic):
            flat = param.reshape(-1)
            for index in rng.choice(flat.size, size=min(coordinates, flat.size), replace=False):
                original = flat[index]
                flat[index] = original + FINITE_DIFFERENCE_STEP
                upper = loss()[0]
                flat[index] = original - FINITE_DIFFERENCE_STEP
                lower = loss()[0]
                flat[index] = original
                numeric = (upper - lower) / (2 * FINITE_DIFFERENCE_STEP)
                worst = max(worst, _relative_error(float(grad.reshape(-1)[index]), numeric))
    return worst
