"""
Harness

Corpus ingestion and the pipeline operations behind the CLI: feature
extraction, per-action evaluation, transferability, adversarial training
rounds and report rendering. Every artifact carries the feature layout
digest and the settings digest it was produced with.
"""
import json
import hashlib
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd

from evasionlab.common.seeds import derive_seed
from evasionlab.detector import (
    MALICIOUS,
    BENIGN,
    Dataset,
    DetectorModel,
    load_model,
    evaluate_auc,
    model_digest,
    score,
    train_gradient_boosting,
)
from evasionlab.featurizer import BenignDictionary, EmptyCorpus, extract_features, feature_layout_digest
from evasionlab.gan import GanModel
from evasionlab.mutation_env import (
    ACTIONS,
    ActionKind,
    BenignPool,
    EnvConfig,
    EnvError,
    MutationTrace,
    Policy,
    SampleAlreadyEvasive,
    preservation_violations,
    reset,
    run_episode,
    step,
)
from evasionlab.pe_core import LayoutConflict, PeFormatError, parse_pe

logger = logging.getLogger("flask.app")

MANIFEST_VERSION = 1
LABELS = {"benign": BENIGN, "malicious": MALICIOUS}
ACTION_COLUMNS = ["action", "attempts", "structural_functional", "mean_final_score", "evasion_rate"]
POLICY_COLUMNS = ["policy", "episodes", "evasion_rate", "mean_steps"]
ROUND_COLUMNS = [
    "round", "detector_before", "detector_after", "evasion_rate_before", "evasion_rate_after",
    "added_mutants", "auc_before", "auc_after",
]

Sample = Tuple[str, bytes]
PolicyFactory = Callable[[int], Policy]


class HarnessError(Exception):
    """Base class for harness errors"""


class ConflictingLabel(HarnessError):
    """Used when the same file is labelled benign and malicious"""


class ArtifactMismatch(HarnessError):
    """Used when artifacts were built with different feature layouts or settings"""


class IoFailure(HarnessError):
    """Used when a report cannot be written"""


class NoMutantsGenerated(HarnessError):
    """Used when an adversarial training round has no evading mutant"""

    def __init__(self, message: str, completed: Sequence["AdvTrainRound"] = ()):
        super().__init__(message)
        self.completed = list(completed)


######################################################################
#  W O R K S P A C E
######################################################################
class Workspace:
    """The on-disk layout of one run"""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def features(self) -> Path:
        return self.root / "features.csv"

    @property
    def dictionary(self) -> Path:
        return self.root / "dictionary.json"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    @property
    def mutants(self) -> Path:
        return self.root / "mutants"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def ensure(self) -> "Workspace":
        """Creates the directories"""
        for folder in (self.root, self.models, self.runs, self.mutants, self.reports):
            folder.mkdir(parents=True, exist_ok=True)
        return self


def check_layout(data: dict, name: str) -> None:
    """Refuses artifacts built with another feature layout"""
    found = data.get("layout_digest")
    if found != feature_layout_digest():
        raise ArtifactMismatch(f"{name} was built with feature layout {found!r}, expected {feature_layout_digest()}")


def read_artifact(path, name: str) -> dict:
    """Reads a JSON artifact and checks its feature layout"""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as error:
        raise IoFailure(f"cannot read {name} at {path}: {error}") from error
    except ValueError as error:
        raise ArtifactMismatch(f"{name} at {path} is not valid JSON") from error
    check_layout(data, name)
    return data


def load_detector(path) -> DetectorModel:
    """Reads a detector file after the layout check"""
    read_artifact(path, "detector")
    return load_model(Path(path).read_bytes())


def load_gan(path) -> GanModel:
    """Reads a GAN file after the layout check"""
    return GanModel.deserialize(read_artifact(path, "GAN"))


def load_dictionary(path, config_digest: str = "") -> BenignDictionary:
    """Reads the benign dictionary after the layout and settings checks

    A dictionary without a config digest is refused. One built under other
    settings is still usable, since the bucket layout already matched, but
    it is logged.
    """
    data = read_artifact(path, "dictionary")
    if "config_digest" not in data:
        raise ArtifactMismatch(f"dictionary at {path} does not record the settings it was built with")
    stamped = data["config_digest"]
    if config_digest and stamped and stamped != config_digest:
        logger.warning("Dictionary at %s was built under settings %s, running with %s",
                       path, stamped[:12], config_digest[:12])
    return BenignDictionary.deserialize(data)


######################################################################
#  M A N I F E S T
######################################################################
@dataclass(frozen=True)
class ManifestEntry:
    """One ingested file"""

    path: str
    digest: str
    label: str
    size: int

    @property
    def sample_id(self) -> str:
        """Short id derived from the digest"""
        return self.digest[:16]


@dataclass(frozen=True)
class CorpusManifest:
    """Every ingested file with its digest and label"""

    entries: Tuple[ManifestEntry, ...]
    created_at: str = ""
    tool_version: str = ""

    def serialize(self) -> dict:
        """Serializes the manifest into a dictionary"""
        return {
            "version": MANIFEST_VERSION,
            "created_at": self.created_at,
            "tool_version": self.tool_version,
            "entries": [vars(entry) for entry in self.entries],
        }

    @classmethod
    def deserialize(cls, data: dict) -> "CorpusManifest":
        """Rebuilds a manifest from its dictionary form"""
        if data.get("version") != MANIFEST_VERSION:
            raise ArtifactMismatch(f"unsupported manifest version {data.get('version')!r}")
        entries = tuple(ManifestEntry(**entry) for entry in data["entries"])
        return cls(entries, data.get("created_at", ""), data.get("tool_version", ""))

    def save(self, path) -> None:
        """Writes the manifest JSON"""
        Path(path).write_text(json.dumps(self.serialize(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        """Reads a manifest written by save"""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as error:
            raise IoFailure(f"cannot read the manifest at {path}; run ingest first") from error
        except ValueError as error:
            raise ArtifactMismatch(f"manifest at {path} is not valid JSON") from error
        return cls.deserialize(data)

    def with_label(self, label: str) -> List[ManifestEntry]:
        """Entries of one label"""
        return [entry for entry in self.entries if entry.label == label]


def ingest(sources: Sequence[Tuple[str, str]], tool_version: str = "") -> CorpusManifest:
    """Parses every file under the (directory, label) sources

    Files that are not PE are skipped with a warning; a file labelled both
    ways raises ConflictingLabel; an identical file seen twice is kept once.
    """
    by_digest: Dict[str, ManifestEntry] = {}
    for directory, label in sources:
        if label not in LABELS:
            raise HarnessError(f"label must be benign or malicious, got {label!r}")
        folder = Path(directory)
        if not folder.is_dir():
            raise HarnessError(f"{directory} is not a directory")
        for path in sorted(p for p in folder.rglob("*") if p.is_file()):
            data = path.read_bytes()
            try:
                parse_pe(data)
            except PeFormatError as error:
                logger.warning("Skipping %s: %s", path, error)
                continue
            digest = hashlib.sha256(data).hexdigest()
            known = by_digest.get(digest)
            if known is not None:
                if known.label != label:
                    raise ConflictingLabel(f"{path} is labelled {label} but {known.path} is {known.label}")
                continue
            by_digest[digest] = ManifestEntry(str(path), digest, label, len(data))
    if not by_digest:
        raise EmptyCorpus("no PE file found in the sources")
    entries = tuple(sorted(by_digest.values(), key=lambda e: (e.label, e.path)))
    logger.info("Ingested %d files (%d benign, %d malicious)", len(entries),
                sum(e.label == "benign" for e in entries), sum(e.label == "malicious" for e in entries))
    return CorpusManifest(entries, datetime.now(timezone.utc).isoformat(), tool_version)


def load_samples(entries: Sequence[ManifestEntry]) -> List[Sample]:
    """(sample_id, bytes) for manifest entries"""
    return [(entry.sample_id, Path(entry.path).read_bytes()) for entry in entries]


def extract(manifest: CorpusManifest, split_seed: int = 0) -> Dataset:
    """Feature rows for every manifest entry"""
    rows = []
    for entry in manifest.entries:
        image = parse_pe(Path(entry.path).read_bytes())
        rows.append((extract_features(image), LABELS[entry.label], entry.sample_id))
    return Dataset.from_rows(rows, split_seed)


def detected_samples(samples: Sequence[Sample], detector: DetectorModel, threshold: float) -> List[Sample]:
    """Samples the detector scores at or above the threshold"""
    kept = []
    for sample_id, data in samples:
        if score(detector, extract_features(parse_pe(data))) >= threshold:
            kept.append((sample_id, data))
    return kept


def load_environment(workspace: Workspace, manifest: CorpusManifest, detector: DetectorModel,
                     settings, gan_path=None, dictionary_path=None) -> EnvConfig:
    """Episode inputs built from the workspace artifacts and the run settings

    gan_path and dictionary_path replace the workspace files when given.
    """
    pool = BenignPool.from_paths([entry.path for entry in manifest.with_label("benign")])
    if not pool.sections:
        raise EmptyCorpus("the benign pool has no section content")
    return EnvConfig(
        detector=detector,
        gan=load_gan(Path(gan_path) if gan_path else workspace.models / "gan.json"),
        dictionary=load_dictionary(Path(dictionary_path) if dictionary_path else workspace.dictionary,
                                   settings.digest()),
        pool=pool,
        threshold=settings.threshold,
        max_steps=settings.max_steps,
        stall_limit=settings.stall_limit,
        max_imports=settings.max_imports_per_step,
        section_limit=settings.section_content_limit,
        whitelist=settings.whitelist,
    )


def split_samples(samples: Sequence[Sample], holdout_fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    """Seeded disjoint (training, holdout) split in sample id order"""
    ordered = sorted(samples, key=lambda s: s[0])
    order = np.random.default_rng(derive_seed(seed, "sample-split")).permutation(len(ordered))
    cut = int(round(len(ordered) * holdout_fraction))
    holdout = sorted((ordered[i] for i in order[:cut]), key=lambda s: s[0])
    training = sorted((ordered[i] for i in order[cut:]), key=lambda s: s[0])
    return training, holdout


######################################################################
#  E V A L U A T I O N
######################################################################
@dataclass(frozen=True)
class ActionRow:
    """Single-step results of one action"""

    action: str
    attempts: int
    structural_functional: float
    mean_final_score: float
    evasion_rate: float


@dataclass(frozen=True)
class PolicyRow:
    """Full-episode results of one policy"""

    policy: str
    episodes: int
    evasion_rate: float
    mean_steps: float


@dataclass(frozen=True)
class EvasionReport:
    """Per-action and per-policy evasion results"""

    actions: Tuple[ActionRow, ...]
    policies: Tuple[PolicyRow, ...] = ()
    config_digest: str = ""
    layout_digest: str = field(default_factory=feature_layout_digest)

    def serialize(self) -> dict:
        """Serializes the report into a dictionary"""
        return {
            "config_digest": self.config_digest,
            "layout_digest": self.layout_digest,
            "actions": [vars(row) for row in self.actions],
            "policies": [vars(row) for row in self.policies],
        }

    @classmethod
    def deserialize(cls, data: dict) -> "EvasionReport":
        """Rebuilds a report from its dictionary form"""
        check_layout(data, "report")
        return cls(
            tuple(ActionRow(**row) for row in data["actions"]),
            tuple(PolicyRow(**row) for row in data["policies"]),
            data.get("config_digest", ""),
            data["layout_digest"],
        )

    def row(self, action: ActionKind) -> ActionRow:
        """The row of one action"""
        return next(row for row in self.actions if row.action == action.value)


def evaluate_actions(
    samples: Sequence[Sample],
    env: EnvConfig,
    seed: int,
    policies: Optional[Dict[str, PolicyFactory]] = None,
    config_digest: str = "",
) -> Tuple[EvasionReport, List[MutationTrace]]:
    """Applies each action alone to every detected sample, then runs each policy

    Returns the report and the traces of the policy episodes.
    """
    rows = []
    for action in ACTIONS:
        scores, functional, evaded = [], 0, 0
        for sample_id, data in samples:
            episode_seed = derive_seed(seed, "evaluate-actions", action.value, sample_id)
            try:
                state, _ = reset(env, data, sample_id, episode_seed)
            except SampleAlreadyEvasive as error:
                logger.warning("Skipping %s: %s", sample_id, error)
                continue
            state, _, _, _ = step(state, action, env)
            mutant = state.current_image.raw_bytes
            functional += int(not preservation_violations(state.original_image, mutant))
            scores.append(state.current_score)
            evaded += int(state.current_score < env.threshold)
        if not scores:
            raise EmptyCorpus("no sample is detected at the threshold")
        rows.append(ActionRow(action.value, len(scores), functional / len(scores), float(np.mean(scores)),
                              evaded / len(scores)))

    policy_rows, traces = [], []
    for name, factory in sorted((policies or {}).items()):
        results = run_policy(samples, env, factory, derive_seed(seed, "evaluate-policy", name))
        episodes = [trace for trace, _ in results]
        traces.extend(episodes)
        if episodes:
            policy_rows.append(PolicyRow(
                name, len(episodes), float(np.mean([t.evaded for t in episodes])),
                float(np.mean([len(t.steps) for t in episodes])),
            ))
    return EvasionReport(tuple(rows), tuple(policy_rows), config_digest), traces


def run_policy(samples: Sequence[Sample], env: EnvConfig, factory: PolicyFactory,
               seed: int) -> List[Tuple[MutationTrace, bytes]]:
    """One episode per detected sample, in sample order"""
    results = []
    for sample_id, data in samples:
        episode_seed = derive_seed(seed, sample_id)
        try:
            results.append(run_episode(env, data, sample_id, factory(episode_seed), episode_seed))
        except SampleAlreadyEvasive:
            logger.debug("Sample %s is already below the threshold", sample_id)
        except (EnvError, LayoutConflict) as error:
            logger.warning("Episode of %s failed: %s", sample_id, error)
    return results


def evasion_rate(results: Sequence[Tuple[MutationTrace, bytes]]) -> float:
    """Fraction of episodes ending evaded"""
    return float(np.mean([trace.evaded for trace, _ in results])) if results else 0.0


@dataclass(frozen=True)
class TransferReport:
    """How many mutants evading one detector also evade another"""

    mutants: int
    evaded_source: int
    evaded_target: int
    transfer_rate: float

    def serialize(self) -> dict:
        """Serializes the report into a dictionary"""
        return dict(vars(self), layout_digest=feature_layout_digest())


def evaluate_transfer(mutants: Sequence[bytes], source: DetectorModel, target: DetectorModel,
                      threshold: float) -> TransferReport:
    """Scores mutants under a second detector

    transfer_rate is the fraction of source-evading mutants that the
    target also scores below the threshold.
    """
    evaded_source = evaded_target = 0
    for data in mutants:
        features = extract_features(parse_pe(data))
        if score(source, features) < threshold:
            evaded_source += 1
            evaded_target += int(score(target, features) < threshold)
    rate = evaded_target / evaded_source if evaded_source else 0.0
    return TransferReport(len(mutants), evaded_source, evaded_target, rate)


######################################################################
#  A D V E R S A R I A L   T R A I N I N G
######################################################################
@dataclass(frozen=True)
class AdvTrainRound:
    """One retraining round"""

    round: int
    detector_before: str
    detector_after: str
    evasion_rate_before: float
    evasion_rate_after: float
    added_mutants: int
    auc_before: float
    auc_after: float

    def serialize(self) -> dict:
        """Serializes the round into a dictionary"""
        return dict(vars(self))


def adv_train_loop(
    training: Dataset,
    clean_holdout: Dataset,
    samples: Sequence[Sample],
    env: EnvConfig,
    policy: PolicyFactory,
    rounds: int,
    seed: int,
    n_estimators: int = 100,
    learning_rate: float = 0.1,
    max_depth: int = 6,
) -> Tuple[List[AdvTrainRound], DetectorModel]:
    """Adds evading mutants to the training set as malicious and retrains the detector

    Returns the rounds and the final detector. A round without evading
    mutants raises NoMutantsGenerated carrying the completed rounds.
    """
    if rounds < 1:
        raise HarnessError("rounds must be at least 1")
    completed: List[AdvTrainRound] = []
    for index in range(rounds):
        round_seed = derive_seed(seed, "adv-train", index)
        results = run_policy(samples, env, policy, round_seed)
        evading = [(trace, data) for trace, data in results if trace.evaded]
        if not evading:
            raise NoMutantsGenerated(f"round {index} produced no evading mutant", completed)

        rows = [
            (extract_features(parse_pe(data)), MALICIOUS, f"adv{index}-{trace.sample_id}")
            for trace, data in evading
        ]
        training = training.stack(Dataset.from_rows(rows))
        before = env.detector
        after = train_gradient_boosting(training, n_estimators, learning_rate, max_depth,
                                        derive_seed(seed, "adv-train", index, "detector"))
        env = replace(env, detector=after)
        rate_after = evasion_rate(run_policy(samples, env, policy, round_seed))
        completed.append(AdvTrainRound(
            round=index,
            detector_before=model_digest(before),
            detector_after=model_digest(after),
            evasion_rate_before=evasion_rate(results),
            evasion_rate_after=rate_after,
            added_mutants=len(evading),
            auc_before=evaluate_auc(before, clean_holdout),
            auc_after=evaluate_auc(after, clean_holdout),
        ))
        logger.info("Adversarial round %d: %d mutants added, evasion %.3f -> %.3f", index, len(evading),
                    completed[-1].evasion_rate_before, rate_after)
    return completed, env.detector


######################################################################
#  R E P O R T S
######################################################################
def write_report(out_dir, report: EvasionReport, traces: Sequence[MutationTrace] = (),
                 curves: Optional[Dict[str, Sequence[dict]]] = None) -> List[Path]:
    """Writes the report JSON and CSVs, the traces as JSON lines and curve CSVs"""
    root = Path(out_dir)
    written = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        target = root / "evasion_report.json"
        target.write_text(json.dumps(report.serialize(), indent=1, sort_keys=True), encoding="utf-8")
        written.append(target)
        target = root / "actions.csv"
        pd.DataFrame([vars(r) for r in report.actions], columns=ACTION_COLUMNS).to_csv(target, index=False)
        written.append(target)
        target = root / "policies.csv"
        pd.DataFrame([vars(r) for r in report.policies], columns=POLICY_COLUMNS).to_csv(target, index=False)
        written.append(target)
        target = root / "traces.jsonl"
        target.write_text("".join(trace.to_json() + "\n" for trace in traces), encoding="utf-8")
        written.append(target)
        for name, rows in sorted((curves or {}).items()):
            target = root / f"curve_{name}.csv"
            pd.DataFrame(list(rows)).to_csv(target, index=False)
            written.append(target)
    except OSError as error:
        raise IoFailure(f"cannot write the report to {root}: {error}") from error
    return written


def load_report(out_dir) -> Tuple[EvasionReport, List[MutationTrace]]:
    """Reads a report and its traces back"""
    root = Path(out_dir)
    try:
        report = EvasionReport.deserialize(json.loads((root / "evasion_report.json").read_text(encoding="utf-8")))
        lines = (root / "traces.jsonl").read_text(encoding="utf-8").splitlines()
    except OSError as error:
        raise IoFailure(f"cannot read the report in {root}: {error}") from error
    return report, [MutationTrace.deserialize(json.loads(line)) for line in lines if line.strip()]


def read_jsonl(path) -> List[dict]:
    """Reads a JSON lines log"""
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
