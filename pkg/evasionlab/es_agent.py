"""
Evolution strategy agent

Trains the policy network 518 -> 256 (relu) -> 64 (relu) -> 4 that picks a
mutation action from the current feature vector. Candidates are mirrored
Gaussian perturbations of the flat parameter vector; fitness is z-scored
before the update, which is either the shaped NES gradient step or a
separable (diagonal) CMA-ES step.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple
import numpy as np

from evasionlab.common.seeds import derive_seed, rng_for
from evasionlab.config import ConfigError, Settings
from evasionlab.featurizer import FEATURE_DIM, FeatureVector, feature_layout_digest
from evasionlab.mutation_env import ACTIONS, ActionKind, EnvConfig, EnvError, run_episode
from evasionlab.pe_core import LayoutConflict

logger = logging.getLogger("flask.app")

POLICY_VERSION = 1
LAYER_SIZES = (FEATURE_DIM, 256, 64, len(ACTIONS))
PARAM_COUNT = sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(LAYER_SIZES, LAYER_SIZES[1:]))
NES_SHAPED = "nes_shaped"
CMA_FULL = "cma_full"
UPDATE_RULES = (NES_SHAPED, CMA_FULL)
CRASHED = float("-inf")


class EsError(Exception):
    """Base class for agent errors"""


class NonFiniteParams(EsError):
    """Used when a parameter vector has NaN or infinite entries"""


class NonFiniteUpdate(EsError):
    """Used when an update produces NaN or infinite entries"""


@dataclass(frozen=True)
class EsConfig:
    """Search settings"""

    population: int = 32
    sigma: float = 0.05
    alpha: float = 0.01
    generations: int = 100
    episodes: int = 3
    eval_every: int = 10
    success_threshold: float = 0.75
    seed: int = 0
    update_rule: str = NES_SHAPED
    patience: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ConfigError("population must be even and at least 2")
        if self.sigma <= 0 or self.alpha <= 0:
            raise ConfigError("sigma and alpha must be positive")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigError(f"update rule must be one of {UPDATE_RULES}")
        if self.episodes < 1 or self.eval_every < 1 or self.workers < 1:
            raise ConfigError("episodes, eval_every and workers must be at least 1")

    @classmethod
    def from_settings(cls, settings: Settings, **overrides) -> "EsConfig":
        """Builds the search settings from the run settings"""
        values = dict(
            population=settings.es_population,
            sigma=settings.es_sigma,
            alpha=settings.es_alpha,
            generations=settings.es_generations,
            episodes=settings.es_episodes,
            eval_every=settings.es_eval_every,
            success_threshold=settings.es_success_threshold,
            seed=derive_seed(settings.seed, "es_agent"),
            update_rule=settings.es_update_rule,
            patience=settings.es_patience,
            workers=settings.es_workers,
        )
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)


######################################################################
#  P O L I C Y
######################################################################
def unflatten(theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(weight, bias) per layer from the flat vector"""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (PARAM_COUNT,):
        raise ValueError(f"expected {PARAM_COUNT} parameters, got shape {theta.shape}")
    layers, cursor = [], 0
    for fan_in, fan_out in zip(LAYER_SIZES, LAYER_SIZES[1:]):
        weight = theta[cursor:cursor + fan_in * fan_out].reshape(fan_in, fan_out)
        cursor += fan_in * fan_out
        layers.append((weight, theta[cursor:cursor + fan_out]))
        cursor += fan_out
    return layers


def initial_params(seed: int) -> np.ndarray:
    """Scaled Gaussian weights and zero biases"""
    rng = rng_for(seed, "es", "init")
    parts = []
    for fan_in, fan_out in zip(LAYER_SIZES, LAYER_SIZES[1:]):
        parts.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


class PolicyNetwork:
    """The policy as a callable from observation to action"""

    def __init__(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise NonFiniteParams("policy parameters must be finite")
        self.theta = theta
        self.layers = unflatten(theta)

    def action_scores(self, observation) -> np.ndarray:
        """The four action scores"""
        values = observation.values if isinstance(observation, FeatureVector) else np.asarray(observation)
        hidden = values
        for index, (weight, bias) in enumerate(self.layers):
            hidden = hidden @ weight + bias
            if index < len(self.layers) - 1:
                hidden = np.maximum(hidden, 0.0)
        return hidden

    def __call__(self, observation) -> ActionKind:
        # np.argmax returns the lowest index among ties
        return ACTIONS[int(np.argmax(self.action_scores(observation)))]


def policy_forward(theta: np.ndarray, observation: FeatureVector) -> ActionKind:
    """Deterministic argmax action"""
    return PolicyNetwork(theta)(observation)


def save_policy(theta: np.ndarray, path, config_digest: str = "") -> None:
    """Writes the policy JSON file"""
    data = {
        "version": POLICY_VERSION,
        "config_digest": config_digest,
        "shape": list(LAYER_SIZES),
        "layout_digest": feature_layout_digest(),
        "params": np.asarray(theta, dtype=np.float64).tolist(),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle)


def load_policy(path) -> np.ndarray:
    """Reads a policy file written by save_policy"""
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    if data.get("version") != POLICY_VERSION or tuple(data.get("shape", ())) != LAYER_SIZES:
        raise EsError("policy file has another version or shape")
    theta = np.array(data["params"], dtype=np.float64)
    if theta.shape != (PARAM_COUNT,):
        raise EsError("policy file has the wrong parameter count")
    return theta


######################################################################
#  S E A R C H
######################################################################
@dataclass(frozen=True, eq=False)
class SearchState:
    """Mean, step size, diagonal covariance and the CMA evolution paths"""

    theta: np.ndarray
    sigma: float
    diag: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0

    @classmethod
    def start(cls, theta: np.ndarray, sigma: float) -> "SearchState":
        """The state before the first generation"""
        theta = np.array(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise NonFiniteParams("initial parameters must be finite")
        dim = len(theta)
        return cls(theta, float(sigma), np.ones(dim), np.zeros(dim), np.zeros(dim))


@dataclass(frozen=True)
class FitnessRecord:
    """One generation of the search"""

    generation: int
    fitness: Tuple[float, ...]
    shaped: Tuple[float, ...]
    mean_fitness: float
    best_fitness: float
    sigma: float
    holdout_success: Optional[float] = None

    def serialize(self) -> dict:
        """Serializes a record into a dictionary; crashed candidates become null"""
        return {
            "generation": self.generation,
            "fitness": [value if np.isfinite(value) else None for value in self.fitness],
            "shaped": list(self.shaped),
            "mean_fitness": self.mean_fitness,
            "best_fitness": self.best_fitness,
            "sigma": self.sigma,
            "holdout_success": self.holdout_success,
        }

    def to_json(self) -> str:
        """One JSON line"""
        return json.dumps(self.serialize(), sort_keys=True)


def sample_epsilons(dim: int, seed: int, generation: int, population: int) -> np.ndarray:
    """Mirrored noise rows: row 2j is eps_j, row 2j+1 is -eps_j"""
    rows = np.empty((population, dim))
    for pair in range(population // 2):
        eps = np.random.default_rng([seed, generation, pair]).standard_normal(dim)
        rows[2 * pair] = eps
        rows[2 * pair + 1] = -eps
    return rows


def sample_population(state: SearchState, config: EsConfig, generation: Optional[int] = None):
    """Returns (epsilons, candidates) with candidates = theta + sigma * sqrt(diag) * eps"""
    generation = state.generation if generation is None else generation
    epsilons = sample_epsilons(len(state.theta), config.seed, generation, config.population)
    candidates = state.theta + state.sigma * np.sqrt(state.diag) * epsilons
    return epsilons, candidates


def shape_fitness(raw: Sequence[float]) -> np.ndarray:
    """z-scores with the population std; crashed (-inf) entries get the lowest shaped value"""
    raw = np.asarray(raw, dtype=np.float64)
    finite = np.isfinite(raw)
    shaped = np.zeros(len(raw))
    if finite.sum() > 1:
        spread = raw[finite].std()
        if spread > 0:
            shaped[finite] = (raw[finite] - raw[finite].mean()) / spread
    if (~finite).any() and finite.any():
        shaped[~finite] = shaped[finite].min()
    return shaped


def update_params(state: SearchState, epsilons: np.ndarray, shaped: np.ndarray, config: EsConfig) -> SearchState:
    """One search update"""
    if config.update_rule == NES_SHAPED:
        step = config.alpha / (len(shaped) * state.sigma) * (shaped @ epsilons)
        updated = replace(state, theta=state.theta + step, generation=state.generation + 1)
    else:
        updated = _separable_cma(state, epsilons, shaped)
    if not (np.all(np.isfinite(updated.theta)) and np.isfinite(updated.sigma) and np.all(np.isfinite(updated.diag))):
        raise NonFiniteUpdate(f"update of generation {state.generation} is not finite")
    return updated


def _separable_cma(state: SearchState, epsilons: np.ndarray, shaped: np.ndarray) -> SearchState:
    dim, population = len(state.theta), len(shaped)
    mu = population // 2
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mu_eff = 1.0 / np.sum(weights ** 2)

    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff) * (dim + 2.0) / 3.0
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff) * (dim + 2.0) / 3.0)
    expected_norm = np.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim ** 2))

    # stable sort keeps candidate order among equal fitness
    ranked = np.argsort(-shaped, kind="stable")[:mu]
    scale = np.sqrt(state.diag)
    selected_eps = epsilons[ranked]
    selected_steps = selected_eps * scale
    mean_eps = weights @ selected_eps
    mean_step = weights @ selected_steps

    theta = state.theta + state.sigma * mean_step
    p_sigma = (1.0 - c_sigma) * state.p_sigma + np.sqrt(c_sigma * (2.0 - c_sigma) * mu_eff) * mean_eps
    norm = np.linalg.norm(p_sigma)
    generation = state.generation + 1
    h_sigma = float(norm / np.sqrt(1.0 - (1.0 - c_sigma) ** (2 * generation)) < (1.4 + 2.0 / (dim + 1)) * expected_norm)
    p_c = (1.0 - c_c) * state.p_c + h_sigma * np.sqrt(c_c * (2.0 - c_c) * mu_eff) * mean_step
    diag = (
        (1.0 - c_1 - c_mu) * state.diag
        + c_1 * (p_c ** 2 + (1.0 - h_sigma) * c_c * (2.0 - c_c) * state.diag)
        + c_mu * (weights @ selected_steps ** 2)
    )
    sigma = state.sigma * np.exp(c_sigma / d_sigma * (norm / expected_norm - 1.0))
    return SearchState(theta, float(sigma), diag, p_sigma, p_c, generation)


class EvolutionStrategy:
    """ask/tell driver around SearchState"""

    def __init__(self, theta: np.ndarray, config: EsConfig):
        self.config = config
        self.state = SearchState.start(theta, config.sigma)

    @property
    def theta(self) -> np.ndarray:
        """Current mean"""
        return self.state.theta

    def ask(self) -> Tuple[np.ndarray, np.ndarray]:
        """(epsilons, candidates) of the current generation"""
        return sample_population(self.state, self.config)

    def tell(self, epsilons: np.ndarray, raw: Sequence[float]) -> FitnessRecord:
        """Consumes fitness values in candidate order and updates the state"""
        raw = np.asarray(raw, dtype=np.float64)
        shaped = shape_fitness(raw)
        finite = raw[np.isfinite(raw)]
        record = FitnessRecord(
            generation=self.state.generation,
            fitness=tuple(float(v) for v in raw),
            shaped=tuple(float(v) for v in shaped),
            mean_fitness=float(finite.mean()) if len(finite) else CRASHED,
            best_fitness=float(finite.max()) if len(finite) else CRASHED,
            sigma=self.state.sigma,
        )
        self.state = update_params(self.state, epsilons, shaped, self.config)
        return record


######################################################################
#  F I T N E S S
######################################################################
Sample = Tuple[str, bytes]


def evaluate_fitness(theta: np.ndarray, samples: Sequence[Sample], env: EnvConfig, episodes: int,
                     seed_tags: Tuple) -> float:
    """Mean final reward over episodes x samples; -inf when an episode fails"""
    if not samples:
        raise ConfigError("fitness needs at least one training sample")
    try:
        policy = PolicyNetwork(theta)
        rewards = []
        for sample_id, data in samples:
            for episode in range(episodes):
                trace, _ = run_episode(env, data, sample_id, policy, derive_seed(*seed_tags, sample_id, episode))
                rewards.append(trace.final_reward)
    except (EnvError, LayoutConflict, NonFiniteParams) as error:
        logger.warning("Candidate %s crashed: %s", seed_tags[1:], error)
        return CRASHED
    return float(np.mean(rewards))


def _candidate_fitness(arguments) -> float:
    return evaluate_fitness(*arguments)


def evaluate_population(candidates: np.ndarray, samples: Sequence[Sample], env: EnvConfig, config: EsConfig,
                        generation: int) -> List[float]:
    """Fitness of every candidate, in candidate order"""
    jobs = [
        (candidate, samples, env, config.episodes, (config.seed, generation, index))
        for index, candidate in enumerate(candidates)
    ]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_candidate_fitness, jobs))
    return [_candidate_fitness(job) for job in jobs]


def evaluate_holdout(theta: np.ndarray, samples: Sequence[Sample], env: EnvConfig, seed: int) -> float:
    """Fraction of holdout samples whose episode ends evaded"""
    if not samples:
        return 0.0
    policy = PolicyNetwork(theta)
    evaded = 0
    for sample_id, data in samples:
        try:
            trace, _ = run_episode(env, data, sample_id, policy, derive_seed(seed, "holdout", sample_id))
        except (EnvError, LayoutConflict) as error:
            logger.warning("Holdout episode of %s failed: %s", sample_id, error)
            continue
        evaded += int(trace.evaded)
    return evaded / len(samples)


def train_agent(
    env: EnvConfig,
    training: Sequence[Sample],
    holdout: Sequence[Sample],
    config: EsConfig,
    theta: Optional[np.ndarray] = None,
    on_record: Optional[Callable[[FitnessRecord], None]] = None,
) -> Tuple[np.ndarray, List[FitnessRecord]]:
    """Runs the search; returns the best parameters by holdout success and the records

    Stops early once the holdout success rate reaches the threshold, or when
    the best fitness has not improved for `patience` generations.
    """
    if not training or not holdout:
        raise ConfigError("training and holdout samples must be non-empty")
    if {s for s, _ in training} & {s for s, _ in holdout}:
        raise ConfigError("training and holdout samples must be disjoint")
    theta = initial_params(config.seed) if theta is None else np.asarray(theta, dtype=np.float64)
    strategy = EvolutionStrategy(theta, config)
    best_theta, best_rate = strategy.theta.copy(), -1.0
    best_fitness, stale = CRASHED, 0
    records: List[FitnessRecord] = []
    logger.info("Training agent: %d generations of %d candidates (%s)",
                config.generations, config.population, config.update_rule)

    for generation in range(config.generations):
        epsilons, candidates = strategy.ask()
        fitness = evaluate_population(candidates, training, env, config, generation)
        record = strategy.tell(epsilons, fitness)

        last = generation == config.generations - 1
        stop = False
        if (generation + 1) % config.eval_every == 0 or last:
            rate = evaluate_holdout(strategy.theta, holdout, env, config.seed)
            record = replace(record, holdout_success=rate)
            if rate > best_rate:
                best_theta, best_rate = strategy.theta.copy(), rate
            logger.info("Generation %d: mean fitness %.4f, holdout success %.3f", generation,
                        record.mean_fitness, rate)
            stop = rate >= config.success_threshold

        if record.best_fitness > best_fitness:
            best_fitness, stale = record.best_fitness, 0
        else:
            stale += 1
        records.append(record)
        if on_record:
            on_record(record)
        if stop:
            logger.info("Holdout success reached %.2f, stopping", config.success_threshold)
            break
        if config.patience and stale >= config.patience:
            logger.warning("No fitness progress for %d generations, stopping", stale)
            if best_rate < 0:
                best_theta = strategy.theta.copy()
            break
    return best_theta, records
