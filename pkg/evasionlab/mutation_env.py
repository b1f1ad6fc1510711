"""
Mutation environment

The four functionality preserving actions and the episodic environment
around them. An episode starts from a detected sample, caches the GAN's
adversarial vector for it, and scores every mutant from its re-parsed
bytes. The reward of a step is the original score minus the score after it.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd

from evasionlab.common.seeds import derive_seed, rng_for
from evasionlab.detector import DetectorModel, score
from evasionlab.featurizer import (
    BenignDictionary,
    FeatureVector,
    Space,
    bucket_to_candidates,
    extract_features,
)
from evasionlab.gan import GanModel, generate_adversarial_features, noise
from evasionlab.pe_core import (
    LayoutConflict,
    PeFormatError,
    PeImage,
    add_imports,
    append_overlay,
    append_section,
    group_imports,
    parse_pe,
    rename_section,
    validate_pe,
    write_pe,
)

logger = logging.getLogger("flask.app")

ADDED_SECTION_CHARACTERISTICS = 0x40000040
DEFAULT_WHITELIST = ("advapi32", "kernel32", "ole32", "shell32", "user32")

EVADED = "evaded"
STEP_LIMIT = "step_limit"
NO_OP_STALL = "no_op_stall"


class ActionKind(Enum):
    """The four actions, in policy output order"""

    SECTION_RENAME = "section_rename"
    SECTION_ADD = "section_add"
    ADD_IMPORTS = "add_imports"
    APPEND_BENIGN_BINARY_OVERLAY = "append_benign_binary_overlay"

    @property
    def index(self) -> int:
        """Position of the action in the policy output"""
        return ACTIONS.index(self)


ACTIONS = tuple(ActionKind)


class EnvError(Exception):
    """Base class for environment errors"""


class NoCandidateAvailable(EnvError):
    """Used when an action has nothing realizable to apply"""


class SampleAlreadyEvasive(EnvError):
    """Used when a sample already scores below the threshold"""


class ParseFailure(EnvError):
    """Used when a sample or a mutant cannot be parsed"""


class EpisodeFinished(EnvError):
    """Used when stepping a finished episode"""


######################################################################
#  B E N I G N   P O O L
######################################################################
@dataclass(frozen=True)
class BenignPool:
    """Benign file bytes and the section contents harvested from them"""

    files: Tuple[bytes, ...]
    sections: Tuple[bytes, ...]

    @classmethod
    def from_bytes(cls, files: Sequence[bytes]) -> "BenignPool":
        """Harvests every non-empty section of the files that parse"""
        sections = []
        for data in files:
            try:
                image = parse_pe(data)
            except PeFormatError as error:
                logger.warning("Benign pool file skipped: %s", error)
                continue
            sections.extend(
                image.section_data(index) for index, section in enumerate(image.sections) if section.raw_size
            )
        return cls(tuple(bytes(f) for f in files), tuple(s for s in sections if s))

    @classmethod
    def from_paths(cls, paths: Sequence) -> "BenignPool":
        """Reads the files in sorted path order"""
        return cls.from_bytes([Path(p).read_bytes() for p in sorted(str(p) for p in paths)])


@dataclass(frozen=True)
class EnvConfig:
    """Shared, immutable inputs of every episode"""

    detector: DetectorModel
    gan: GanModel
    dictionary: BenignDictionary
    pool: BenignPool
    threshold: float = 0.80
    max_steps: int = 10
    stall_limit: int = 3
    max_imports: int = 8
    section_limit: int = 4096
    whitelist: Tuple[str, ...] = DEFAULT_WHITELIST


######################################################################
#  A C T I O N S
######################################################################
def wanted_buckets(image: PeImage, adversarial: FeatureVector, space: Space) -> List[int]:
    """Buckets set in the adversarial vector but not in the image, lowest first"""
    present = set(extract_features(image).active(space))
    return [bucket for bucket in adversarial.active(space) if bucket not in present]


def _usable_section_name(name: str) -> bool:
    return name.isascii() and 0 < len(name) <= 8


def _wanted_section_name(image: PeImage, adversarial: FeatureVector, dictionary: BenignDictionary) -> str:
    for bucket in wanted_buckets(image, adversarial, Space.SECTION):
        names = [n for n in bucket_to_candidates(dictionary, bucket, Space.SECTION) if _usable_section_name(n)]
        if names:
            return names[0]
    raise NoCandidateAvailable("no requested section bucket has a benign name")


def _dll_base(dll_name: str) -> str:
    name = dll_name.lower()
    return name[:-4] if name.endswith(".dll") else name


def apply_action(
    image: PeImage,
    action: ActionKind,
    adversarial: FeatureVector,
    dictionary: BenignDictionary,
    pool: BenignPool,
    seed: int,
    max_imports: int = 8,
    section_limit: int = 4096,
    whitelist: Sequence[str] = DEFAULT_WHITELIST,
) -> Tuple[PeImage, dict]:
    """Applies one action, returning the mutated image and what was done"""
    rng = rng_for(seed, "action", action.value)

    if action is ActionKind.SECTION_RENAME:
        known = {name for names in dictionary.sections.values() for name in names}
        target = next((i for i, s in enumerate(image.sections) if s.name not in known), None)
        if target is None:
            raise NoCandidateAvailable("every section name already appears in benign files")
        name = _wanted_section_name(image, adversarial, dictionary)
        detail = {"index": target, "from": image.sections[target].name, "to": name}
        return rename_section(image, target, name), detail

    if action is ActionKind.SECTION_ADD:
        name = _wanted_section_name(image, adversarial, dictionary)
        if not pool.sections:
            raise NoCandidateAvailable("benign pool has no section content")
        source = int(rng.integers(len(pool.sections)))
        content = pool.sections[source][:section_limit]
        detail = {"name": name, "bytes": len(content), "pool_section": source}
        return append_section(image, name, content, ADDED_SECTION_CHARACTERISTICS), detail

    if action is ActionKind.ADD_IMPORTS:
        allowed = {entry.lower() for entry in whitelist}
        chosen = []
        for bucket in wanted_buckets(image, adversarial, Space.IMPORT):
            for dll, function in bucket_to_candidates(dictionary, bucket, Space.IMPORT):
                if _dll_base(dll) in allowed and not function.startswith("#") and function.isascii():
                    chosen.append((dll, function))
                    break
            if len(chosen) == max_imports:
                break
        if not chosen:
            raise NoCandidateAvailable("no requested import bucket has a whitelisted candidate")
        detail = {"imports": [f"{dll}!{function}" for dll, function in chosen]}
        return add_imports(image, group_imports(chosen)), detail

    if not pool.files:
        raise NoCandidateAvailable("benign pool has no files")
    source = int(rng.integers(len(pool.files)))
    payload = pool.files[source]
    return append_overlay(image, payload), {"bytes": len(payload), "pool_file": source}


######################################################################
#  T R A C E S
######################################################################
@dataclass(frozen=True)
class TraceStep:
    """One recorded step"""

    action: ActionKind
    detail: dict
    score_after: float
    reward: float
    applied: bool = True

    def serialize(self) -> dict:
        """Serializes a step into a dictionary"""
        return {
            "action": self.action.value,
            "detail": self.detail,
            "score_after": self.score_after,
            "reward": self.reward,
            "applied": self.applied,
        }


@dataclass(frozen=True)
class MutationTrace:
    """Everything that happened to one sample in one episode"""

    sample_id: str
    original_score: float
    steps: Tuple[TraceStep, ...] = ()
    terminal: Optional[str] = None

    @property
    def final_score(self) -> float:
        """Score after the last step (the original score when no step ran)"""
        return self.steps[-1].score_after if self.steps else self.original_score

    @property
    def final_reward(self) -> float:
        """original_score - final_score"""
        return self.original_score - self.final_score

    @property
    def evaded(self) -> bool:
        """True when the episode ended below the threshold"""
        return self.terminal == EVADED

    def serialize(self) -> dict:
        """Serializes a trace into a dictionary"""
        return {
            "sample_id": self.sample_id,
            "original_score": self.original_score,
            "steps": [step.serialize() for step in self.steps],
            "terminal": self.terminal,
        }

    def to_json(self) -> str:
        """One JSON line"""
        return json.dumps(self.serialize(), sort_keys=True)

    @classmethod
    def deserialize(cls, data: dict) -> "MutationTrace":
        """Rebuilds a trace from its dictionary form"""
        steps = tuple(
            TraceStep(ActionKind(s["action"]), dict(s["detail"]), float(s["score_after"]), float(s["reward"]),
                      bool(s.get("applied", True)))
            for s in data["steps"]
        )
        return cls(str(data["sample_id"]), float(data["original_score"]), steps, data.get("terminal"))


######################################################################
#  E N V I R O N M E N T
######################################################################
@dataclass(frozen=True)
class EnvState:
    """State of one episode; step returns a new state"""

    sample_id: str
    original_image: PeImage
    current_image: PeImage
    original_score: float
    current_score: float
    adversarial_vector: FeatureVector
    seed: int
    step_count: int = 0
    stall: int = 0
    done: bool = False
    terminal: Optional[str] = None
    steps: Tuple[TraceStep, ...] = field(default=(), repr=False)

    @property
    def trace(self) -> MutationTrace:
        """The trace so far"""
        return MutationTrace(self.sample_id, self.original_score, self.steps, self.terminal)


def reset(config: EnvConfig, sample: bytes, sample_id: str, seed: int) -> Tuple[EnvState, FeatureVector]:
    """Starts an episode on a detected sample"""
    try:
        image = parse_pe(sample)
    except PeFormatError as error:
        raise ParseFailure(f"{sample_id}: {error}") from error
    features = extract_features(image)
    original = score(config.detector, features)
    if original < config.threshold:
        raise SampleAlreadyEvasive(f"{sample_id} scores {original:.3f}, below {config.threshold}")
    z = noise(rng_for(seed, "episode", "noise"), config.gan.noise_dim)
    adversarial = generate_adversarial_features(config.gan, features, z)
    state = EnvState(sample_id, image, image, original, original, adversarial, seed)
    return state, features


def step(state: EnvState, action: ActionKind, config: EnvConfig) -> Tuple[EnvState, FeatureVector, float, bool]:
    """Applies an action, re-parses the written mutant and scores it

    Actions with nothing to apply are recorded as no-ops.
    """
    if state.done:
        raise EpisodeFinished(f"episode of {state.sample_id} is finished")
    action_seed = derive_seed(state.seed, "step", state.step_count)
    try:
        mutated, detail = apply_action(
            state.current_image, action, state.adversarial_vector, config.dictionary, config.pool, action_seed,
            config.max_imports, config.section_limit, config.whitelist,
        )
        applied = True
    except (NoCandidateAvailable, LayoutConflict) as error:
        mutated, detail, applied = state.current_image, {"no_op": str(error)}, False

    if applied:
        try:
            image = parse_pe(write_pe(mutated))
        except PeFormatError as error:
            raise ParseFailure(f"{state.sample_id}: mutant does not parse: {error}") from error
        observation = extract_features(image)
        score_after = score(config.detector, observation)
    else:
        image = state.current_image
        observation = extract_features(image)
        score_after = state.current_score

    reward = state.original_score - score_after
    step_count = state.step_count + 1
    stall = 0 if applied else state.stall + 1
    terminal = None
    if score_after < config.threshold:
        terminal = EVADED
    elif step_count >= config.max_steps:
        terminal = STEP_LIMIT
    elif stall >= config.stall_limit:
        terminal = NO_OP_STALL

    record = TraceStep(action, detail, score_after, reward, applied)
    new_state = replace(
        state,
        current_image=image,
        current_score=score_after,
        step_count=step_count,
        stall=stall,
        done=terminal is not None,
        terminal=terminal,
        steps=state.steps + (record,),
    )
    return new_state, observation, reward, new_state.done


Policy = Callable[[FeatureVector], ActionKind]


def run_episode(config: EnvConfig, sample: bytes, sample_id: str, policy: Policy,
                seed: int) -> Tuple[MutationTrace, bytes]:
    """Runs a policy until the episode ends; returns the trace and the mutant bytes"""
    state, observation = reset(config, sample, sample_id, seed)
    while not state.done:
        state, observation, _, _ = step(state, policy(observation), config)
    return state.trace, state.current_image.raw_bytes


def random_policy(seed: int) -> Policy:
    """Uniformly random actions"""
    rng = rng_for(seed, "random-policy")

    def policy(_observation: FeatureVector) -> ActionKind:
        return ACTIONS[int(rng.integers(len(ACTIONS)))]

    return policy


def constant_policy(action: ActionKind) -> Policy:
    """Always the same action"""
    return lambda _observation: action


class MutationEnv:
    """Gym-style wrapper: reset() and step(action index) over a list of samples"""

    action_count = len(ACTIONS)

    def __init__(self, config: EnvConfig, samples: Sequence[Tuple[str, bytes]], seed: int = 0):
        self.config = config
        self.samples = list(samples)
        self.seed = seed
        self.episode = 0
        self.state: Optional[EnvState] = None

    def reset(self, index: Optional[int] = None) -> np.ndarray:
        """Starts the next episode (or the one on sample index) and returns the observation"""
        if index is None:
            index = self.episode % len(self.samples)
        sample_id, data = self.samples[index]
        self.state, observation = reset(self.config, data, sample_id, derive_seed(self.seed, "episode", self.episode))
        self.episode += 1
        return observation.values

    def step(self, action: int):
        """Returns (observation, reward, done, info)"""
        if self.state is None:
            raise EpisodeFinished("call reset first")
        self.state, observation, reward, done = step(self.state, ACTIONS[action], self.config)
        return observation.values, reward, done, {"score": self.state.current_score, "terminal": self.state.terminal}


######################################################################
#  P R E S E R V A T I O N
######################################################################
def _import_set(image: PeImage) -> set:
    return {(d.dll_name.lower(), f.label) for d in image.imports for f in d.functions}


def preservation_violations(original: PeImage, mutant: bytes) -> List[str]:
    """Static checks that a mutant keeps what the loader needs; empty when it passes"""
    try:
        image = parse_pe(mutant)
    except PeFormatError:
        return ["PARSE_FAILED"]
    problems = [v.code for v in validate_pe(image).violations if v.severity == "error"]
    if image.optional_header.entry_point_rva != original.optional_header.entry_point_rva:
        problems.append("ENTRYPOINT_CHANGED")
    if len(image.sections) < len(original.sections) or any(
        image.section_data(i) != original.section_data(i) for i in range(len(original.sections))
    ):
        problems.append("SECTION_BYTES_CHANGED")
    if not _import_set(original) <= _import_set(image):
        problems.append("IMPORTS_REMOVED")
    if parse_pe(write_pe(image)) != image:
        problems.append("ROUND_TRIP_MISMATCH")
    return problems


def write_mutants(out_dir, results: Sequence[Tuple[MutationTrace, bytes]]) -> Path:
    """Writes <sample_id>.mutant files and manifest.csv; returns the manifest path"""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for trace, data in results:
        (root / f"{trace.sample_id}.mutant").write_bytes(data)
        rows.append({
            "sample_id": trace.sample_id,
            "steps": len(trace.steps),
            "final_score": trace.final_score,
            "evaded": trace.evaded,
        })
    manifest = root / "manifest.csv"
    pd.DataFrame(rows, columns=["sample_id", "steps", "final_score", "evaded"]).to_csv(manifest, index=False)
    return manifest
