"""
Flask CLI Command Extensions

The harness command line. Run with `flask --app evasionlab <command>`.
Every command reads the workspace settings file, lets its flags override
it, and exits with 2 on a validation failure or 3 on a model, config or
feature layout mismatch.
"""
import json
import functools
from dataclasses import replace
import click
import pandas as pd

from evasionlab import app, config
from evasionlab.models import CorpusSample, DataValidationError, db
from evasionlab.common import status
from evasionlab.common.seeds import derive_seed
from evasionlab.config import ConfigError, load_settings
from evasionlab.detector import (
    GRADIENT_BOOSTING,
    KINDS,
    RANDOM_FOREST,
    Dataset,
    DetectorError,
    DuplicateSample,
    DegenerateDataset,
    evaluate_auc,
    save_model_file,
    train_gradient_boosting,
    train_random_forest,
)
from evasionlab.es_agent import (
    EsConfig,
    EsError,
    NonFiniteParams,
    NonFiniteUpdate,
    PolicyNetwork,
    load_policy,
    save_policy,
    train_agent,
)
from evasionlab.featurizer import (
    DimensionMismatch,
    EmptyCorpus,
    FeaturizerError,
    Space,
    build_benign_dictionary,
    dictionary_coverage,
)
from evasionlab.gan import EmptySlice, GanError, NonFiniteLoss, evasion_rate as gan_evasion_rate, train_gan
from evasionlab.harness import (
    ROUND_COLUMNS,
    ArtifactMismatch,
    CorpusManifest,
    HarnessError,
    NoMutantsGenerated,
    Workspace,
    detected_samples,
    evaluate_actions,
    evaluate_transfer,
    evasion_rate,
    extract,
    ingest,
    load_detector,
    load_environment,
    load_report,
    load_samples,
    read_artifact,
    read_jsonl,
    run_policy,
    split_samples,
    write_report,
    adv_train_loop,
)
from evasionlab.mutation_env import EnvError, random_policy, write_mutants
from evasionlab.pe_core import LayoutConflict, PeFormatError, parse_pe
from evasionlab.synthetic import build_desk_corpus

HOLDOUT_FRACTION = 0.25
POLICIES = ("agent", "random")
KIND_NAMES = dict({kind: kind for kind in KINDS}, rf=RANDOM_FOREST, gbm=GRADIENT_BOOSTING)


class ValidationFailure(click.ClickException):
    """Bad input, degenerate data or a failed precondition"""

    exit_code = status.EXIT_VALIDATION


class MismatchFailure(click.ClickException):
    """Artifacts that do not belong together"""

    exit_code = status.EXIT_MISMATCH


VALIDATION_ERRORS = (
    ConfigError, DataValidationError, PeFormatError, LayoutConflict, EmptyCorpus, DimensionMismatch,
    DegenerateDataset, DuplicateSample, EmptySlice, NonFiniteLoss, NonFiniteParams, NonFiniteUpdate,
    EnvError, NoMutantsGenerated, OSError,
)
MISMATCH_ERRORS = (ArtifactMismatch, DetectorError, GanError, EsError, FeaturizerError)


def translate_errors(command):
    """Turns library errors into click exceptions carrying the exit code"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except VALIDATION_ERRORS as error:
            app.logger.error("%s: %s", type(error).__name__, error)
            raise ValidationFailure(str(error)) from error
        except MISMATCH_ERRORS as error:
            app.logger.error("%s: %s", type(error).__name__, error)
            raise MismatchFailure(str(error)) from error
        except HarnessError as error:
            app.logger.error("%s: %s", type(error).__name__, error)
            raise ValidationFailure(str(error)) from error

    return wrapper


def kind_option(name, default):
    """A detector kind option taking rf, gbm or the full kind names"""
    return click.option(
        name, type=click.Choice(sorted(KIND_NAMES)), default=default, show_default=True,
        callback=lambda _ctx, _param, value: KIND_NAMES[value],
    )


def workspace_options(command):
    """Adds --workspace, --settings and --seed"""
    command = click.option("--seed", type=int, default=None, help="Top level seed override")(command)
    command = click.option("--settings", "settings_path", default=None, help="Settings file")(command)
    command = click.option("--workspace", default=None, help="Workspace root")(command)
    return command


def open_workspace(workspace, settings_path, **overrides):
    """Returns the workspace and the run settings with the flag overrides applied"""
    settings = load_settings(workspace, settings_path).override(**overrides)
    return Workspace(settings.workspace).ensure(), settings


def stamp(model, settings):
    """Records the settings digest in a model's training metadata"""
    return replace(model, training_meta=dict(model.training_meta, config_digest=settings.digest()))


def split_features(workspace, settings, path=None):
    """The deterministic (training, test) split of the feature rows"""
    data = Dataset.from_csv(path or workspace.features, settings.seed)
    return data.split(HOLDOUT_FRACTION, derive_seed(settings.seed, "split"))


def policy_factory(workspace, name):
    """seed -> policy for the agent file or the uniform baseline"""
    if name == "random":
        return random_policy
    path = workspace.models / "policy.json"
    read_artifact(path, "policy")
    network = PolicyNetwork(load_policy(path))
    return lambda _seed: network


def detected(manifest, env, samples=None):
    """Malicious samples the reward detector flags, from the manifest unless given"""
    if samples is None:
        samples = load_samples(manifest.with_label("malicious"))
    samples = detected_samples(samples, env.detector, env.threshold)
    if not samples:
        raise EmptyCorpus("no malicious sample is detected at the threshold")
    return samples


def environment(workspace, settings, kind=GRADIENT_BOOSTING, detector_path=None, gan_path=None,
                dictionary_path=None):
    """Manifest and episode inputs for the reward detector of the given kind"""
    manifest = CorpusManifest.load(workspace.manifest)
    detector = load_detector(detector_path or workspace.models / f"{kind}.json")
    return manifest, load_environment(workspace, manifest, detector, settings, gan_path, dictionary_path)


def training_curves(workspace):
    """Curve rows for report CSVs, from whatever models and logs exist"""
    curves = {}
    path = workspace.models / f"{GRADIENT_BOOSTING}.json"
    if path.exists():
        losses = json.loads(path.read_text(encoding="utf-8"))["training_meta"].get("loss_curve", [])
        curves["detector_loss"] = [{"round": i, "loss": loss} for i, loss in enumerate(losses)]
    path = workspace.models / "gan.json"
    if path.exists():
        meta = json.loads(path.read_text(encoding="utf-8")).get("train_meta", {})
        curves["gan_loss"] = [
            {"epoch": i, "discriminator": d, "generator": g}
            for i, (d, g) in enumerate(zip(meta.get("discriminator_losses", []), meta.get("generator_losses", [])))
        ]
    path = workspace.runs / "fitness.jsonl"
    if path.exists():
        curves["agent_fitness"] = [
            {key: record[key] for key in ("generation", "mean_fitness", "best_fitness", "sigma", "holdout_success")}
            for record in read_jsonl(path)
        ]
    return curves


######################################################################
# Command to force tables to be rebuilt
# Usage: flask db-create
######################################################################
@app.cli.command("db-create")
def db_create():
    """
    Recreates the sample catalog. The harness manifest is untouched;
    run ingest again to refill it.
    """
    db.drop_all()
    db.create_all()
    db.session.commit()


######################################################################
#  C O R P U S
######################################################################
@app.cli.command("synth-corpus")
@click.argument("out_dir")
@click.option("--benign", default=60, show_default=True, help="Number of benign files")
@click.option("--malicious", default=60, show_default=True, help="Number of malicious files")
@click.option("--seed", type=int, default=config.SEED, show_default=True)
def synth_corpus(out_dir, benign, malicious, seed):
    """Writes a desk-scale synthetic corpus under OUT_DIR/benign and OUT_DIR/malicious"""
    written = build_desk_corpus(out_dir, benign, malicious, seed)
    click.echo(f"Wrote {len(written['benign'])} benign and {len(written['malicious'])} malicious files")


@app.cli.command("ingest")
@click.option("--benign", "benign_dirs", multiple=True, help="Directory of benign files")
@click.option("--malicious", "malicious_dirs", multiple=True, help="Directory of malicious files")
@workspace_options
@translate_errors
def ingest_command(benign_dirs, malicious_dirs, workspace, settings_path, seed):
    """Parses and labels the corpus, writes manifest.json and fills the catalog"""
    if not benign_dirs and not malicious_dirs:
        raise ValidationFailure("give at least one --benign or --malicious directory")
    ws, _ = open_workspace(workspace, settings_path, seed=seed)
    sources = [(d, "benign") for d in benign_dirs] + [(d, "malicious") for d in malicious_dirs]
    manifest = ingest(sources, config.TOOL_VERSION)
    manifest.save(ws.manifest)
    for entry in manifest.entries:
        with open(entry.path, "rb") as handle:
            image = parse_pe(handle.read())
        CorpusSample.upsert({
            "digest": entry.digest,
            "label": entry.label,
            "path": entry.path,
            "size": entry.size,
            "sections": len(image.sections),
            "imports": sum(len(d.functions) for d in image.imports),
        })
    click.echo(f"Ingested {len(manifest.entries)} files into {ws.manifest}")


@app.cli.command("extract")
@workspace_options
@translate_errors
def extract_command(workspace, settings_path, seed):
    """Writes features.csv for every manifest entry"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    data = extract(CorpusManifest.load(ws.manifest), settings.seed)
    data.to_csv(ws.features)
    benign, malicious = data.class_counts()
    click.echo(f"Extracted {len(data)} rows ({benign} benign, {malicious} malicious) into {ws.features}")


@app.cli.command("build-dict")
@workspace_options
@translate_errors
def build_dict(workspace, settings_path, seed):
    """Builds the benign dictionary from the benign manifest entries"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    manifest = CorpusManifest.load(ws.manifest)
    dictionary = build_benign_dictionary([entry.path for entry in manifest.with_label("benign")], settings.digest())
    dictionary.save(ws.dictionary)
    click.echo(
        f"Dictionary covers {dictionary_coverage(dictionary, Space.SECTION):.1%} of section buckets and "
        f"{dictionary_coverage(dictionary, Space.IMPORT):.1%} of import buckets"
    )


######################################################################
#  T R A I N I N G
######################################################################
@app.cli.command("train-detector")
@kind_option("--kind", GRADIENT_BOOSTING)
@click.option("--estimators", type=int, default=None, help="Number of trees")
@click.option("--data", "data_path", default=None, help="Feature CSV, defaults to the workspace features")
@click.option("--out", "out_path", default=None, help="Model file, defaults to models/<kind>.json")
@workspace_options
@translate_errors
def train_detector(kind, estimators, data_path, out_path, workspace, settings_path, seed):
    """Trains a detector on the training split and reports the held-out AUC"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    training, test = split_features(ws, settings, data_path)
    model_seed = derive_seed(settings.seed, "detector", kind)
    if kind == RANDOM_FOREST:
        model = train_random_forest(training, estimators or settings.rf_estimators, model_seed,
                                    settings.rf_max_depth, settings.rf_max_features)
    else:
        model = train_gradient_boosting(training, estimators or settings.gbm_estimators,
                                        settings.gbm_learning_rate, settings.gbm_max_depth, model_seed)
    model = stamp(model, settings)
    save_model_file(model, out_path or ws.models / f"{kind}.json")
    click.echo(f"{kind}: held-out AUC {evaluate_auc(model, test):.4f}")


@app.cli.command("train-gan")
@click.option("--epochs", type=int, default=None)
@click.option("--benign", "benign_path", default=None, help="Feature CSV of benign rows")
@click.option("--malicious", "malicious_path", default=None, help="Feature CSV of malicious rows")
@click.option("--blackbox", "blackbox_path", default=None, help="Random forest file, defaults to models/random_forest.json")
@click.option("--out", "out_path", default=None, help="GAN file, defaults to models/gan.json")
@workspace_options
@translate_errors
def train_gan_command(epochs, benign_path, malicious_path, blackbox_path, out_path, workspace, settings_path, seed):
    """Trains the GAN against the random forest black box

    With --benign and --malicious the GAN trains on those CSVs and the
    evasion rate is measured on the malicious rows; otherwise it uses the
    workspace training split and the held-out malicious rows.
    """
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    if (benign_path is None) != (malicious_path is None):
        raise click.UsageError("--benign and --malicious go together")
    if benign_path:
        benign = Dataset.from_csv(benign_path, settings.seed).with_label(0)
        malicious = Dataset.from_csv(malicious_path, settings.seed).with_label(1)
        held_out = malicious
    else:
        training, test = split_features(ws, settings)
        benign, malicious, held_out = training.with_label(0), training.with_label(1), test.with_label(1)
    blackbox = load_detector(blackbox_path or ws.models / f"{RANDOM_FOREST}.json")
    gan_seed = derive_seed(settings.seed, "gan")
    model = train_gan(
        benign, malicious, blackbox,
        epochs=settings.gan_epochs if epochs is None else epochs,
        batch_size=settings.gan_batch_size,
        learning_rate=settings.gan_learning_rate,
        noise_dim=settings.gan_noise_dim,
        seed=gan_seed,
        optimizer=settings.gan_optimizer,
    )
    model.train_meta["config_digest"] = settings.digest()
    model.save(out_path or ws.models / "gan.json")
    rate = gan_evasion_rate(model, held_out, blackbox, gan_seed)
    click.echo(f"GAN evasion rate on {'the given' if benign_path else 'held-out'} malicious rows: {rate:.3f}")


@app.cli.command("train-agent")
@click.option("--generations", type=int, default=None)
@click.option("--population", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--detector", "detector_path", default=None, help="Reward detector, defaults to models/gradient_boosting.json")
@click.option("--gan", "gan_path", default=None, help="GAN file, defaults to models/gan.json")
@click.option("--dict", "dictionary_path", default=None, help="Benign dictionary, defaults to dictionary.json")
@click.option("--samples", "samples_dir", default=None, help="Directory of malicious files, defaults to the manifest")
@click.option("--out", "out_path", default=None, help="Policy file, defaults to models/policy.json")
@workspace_options
@translate_errors
def train_agent_command(generations, population, workers, detector_path, gan_path, dictionary_path, samples_dir,
                        out_path, workspace, settings_path, seed):
    """Trains the policy network with the evolution strategy"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    manifest, env = environment(ws, settings, detector_path=detector_path, gan_path=gan_path,
                                dictionary_path=dictionary_path)
    samples = load_samples(ingest([(samples_dir, "malicious")]).entries) if samples_dir else None
    training, holdout = split_samples(detected(manifest, env, samples), HOLDOUT_FRACTION,
                                      derive_seed(settings.seed, "agent-split"))
    es_config = EsConfig.from_settings(settings, generations=generations, population=population, workers=workers)
    log_path = ws.runs / "fitness.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        theta, records = train_agent(env, training, holdout, es_config,
                                     on_record=lambda record: log.write(record.to_json() + "\n"))
    save_policy(theta, out_path or ws.models / "policy.json", settings.digest())
    rates = [r.holdout_success for r in records if r.holdout_success is not None]
    click.echo(f"Trained {len(records)} generations, best holdout success {max(rates, default=0.0):.3f}")


######################################################################
#  M U T A T I O N   A N D   E V A L U A T I O N
######################################################################
@app.cli.command("mutate")
@click.option("--policy", type=click.Choice(POLICIES), default="agent", show_default=True)
@workspace_options
@translate_errors
def mutate(policy, workspace, settings_path, seed):
    """Runs one episode per detected malicious sample and writes the mutants"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    manifest, env = environment(ws, settings)
    results = run_policy(detected(manifest, env), env, policy_factory(ws, policy),
                         derive_seed(settings.seed, "mutate", policy))
    write_mutants(ws.mutants, results)
    with open(ws.runs / "traces.jsonl", "w", encoding="utf-8") as handle:
        handle.writelines(trace.to_json() + "\n" for trace, _ in results)
    click.echo(f"{len(results)} mutants written, evasion rate {evasion_rate(results):.3f}")


@app.cli.command("evaluate-actions")
@workspace_options
@translate_errors
def evaluate_actions_command(workspace, settings_path, seed):
    """Evaluates each action alone and every available policy"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    manifest, env = environment(ws, settings)
    policies = {"random": random_policy}
    if (ws.models / "policy.json").exists():
        policies["agent"] = policy_factory(ws, "agent")
    report, traces = evaluate_actions(detected(manifest, env), env, derive_seed(settings.seed, "evaluate"),
                                      policies, settings.digest())
    write_report(ws.reports, report, traces, training_curves(ws))
    for row in report.actions:
        click.echo(f"{row.action:32} score {row.mean_final_score:.3f} evasion {row.evasion_rate:.3f} "
                   f"structural {row.structural_functional:.3f}")


@app.cli.command("evaluate-transfer")
@kind_option("--target", RANDOM_FOREST)
@workspace_options
@translate_errors
def evaluate_transfer_command(target, workspace, settings_path, seed):
    """Scores the written mutants under a second detector"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    paths = sorted(ws.mutants.glob("*.mutant"))
    if not paths:
        raise EmptyCorpus(f"no mutants in {ws.mutants}; run mutate first")
    source = load_detector(ws.models / f"{GRADIENT_BOOSTING}.json")
    report = evaluate_transfer([p.read_bytes() for p in paths], source,
                               load_detector(ws.models / f"{target}.json"), settings.threshold)
    (ws.reports / "transfer.json").write_text(json.dumps(report.serialize(), indent=1, sort_keys=True),
                                              encoding="utf-8")
    click.echo(f"{report.evaded_target}/{report.evaded_source} evading mutants also evade {target}")


@app.cli.command("adv-train")
@click.option("--rounds", type=int, default=1, show_default=True)
@click.option("--policy", type=click.Choice(POLICIES), default="agent", show_default=True)
@workspace_options
@translate_errors
def adv_train(rounds, policy, workspace, settings_path, seed):
    """Retrains the gradient boosting detector on evading mutants"""
    ws, settings = open_workspace(workspace, settings_path, seed=seed)
    training, test = split_features(ws, settings)
    manifest, env = environment(ws, settings)
    try:
        completed, detector = adv_train_loop(
            training, test, detected(manifest, env), env, policy_factory(ws, policy), rounds,
            derive_seed(settings.seed, "adv-train"), settings.gbm_estimators, settings.gbm_learning_rate,
            settings.gbm_max_depth,
        )
    except NoMutantsGenerated as error:
        write_rounds(ws, error.completed, settings)
        raise
    save_model_file(stamp(detector, settings), ws.models / f"{GRADIENT_BOOSTING}.adv.json")
    write_rounds(ws, completed, settings)
    for done in completed:
        click.echo(f"round {done.round}: evasion {done.evasion_rate_before:.3f} -> {done.evasion_rate_after:.3f}, "
                   f"AUC {done.auc_before:.4f} -> {done.auc_after:.4f}")


def write_rounds(ws, rounds, settings):
    """adv_rounds.json and adv_rounds.csv"""
    rows = [done.serialize() for done in rounds]
    pd.DataFrame(rows, columns=ROUND_COLUMNS).to_csv(ws.reports / "adv_rounds.csv", index=False)
    payload = {"config_digest": settings.digest(), "rounds": rows}
    (ws.reports / "adv_rounds.json").write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


@app.cli.command("report")
@workspace_options
@translate_errors
def report(workspace, settings_path, seed):
    """Re-renders the report files from the persisted report and traces"""
    ws, _ = open_workspace(workspace, settings_path, seed=seed)
    evasion_report, traces = load_report(ws.reports)
    for path in write_report(ws.reports, evasion_report, traces, training_curves(ws)):
        click.echo(str(path))
