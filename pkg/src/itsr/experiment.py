"""Experiment runner: config parsing, training, evaluation, artifacts.

A run is one process: ingest or synthesize data, build the contaminated
training set, train with the chosen method (plain autoencoder,
adversarial autoencoder, or adversarial autoencoder with iterative
training-set refinement), calibrate thresholds on the training set, and
evaluate on the observed-anomaly and (when available) unobserved-anomaly
test splits. Every artifact is reproducible byte for byte from the
config echo and seed.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import data, detect, models, nn, refine

METHODS = ("ae", "aae", "itsr")
METHOD_CRITERION = {"ae": "rec", "aae": "combined", "itsr": "combined"}

METRICS_CSV = "metrics.csv"
CURVES_TRAIN_CSV = "curves_train.csv"
CURVES_CHECKPOINTS_CSV = "curves_checkpoints.csv"
CONFIG_ECHO = "config_echo.txt"
LOGS_JSON = "logs.json"
MODEL_BIN = "model.bin"

METRICS_HEADER = ["split", "method", "criterion", "tp", "fp", "tn", "fn",
                  "tpr", "tnr", "bacc", "t_rec", "t_prior_log"]
CHECKPOINT_HEADER = ["epoch", "split", "tpr", "tnr", "bacc"]
COMPARE_HEADER = ["method", "split", "criterion", "tpr", "tnr", "bacc"]

# Keys that define the data a run was evaluated on; compare_runs refuses
# to tabulate runs that disagree on any of them.
_DATA_KEYS = ("data", "normal_class", "anomaly_class", "alpha", "n_normal",
              "idx.train_images", "idx.train_labels", "idx.test_images",
              "idx.test_labels", "synth.image_side", "synth.separation",
              "synth.jitter", "synth.test_normal", "synth.test_anomaly", "scale")


class ConfigError(ValueError):
    """Raised for malformed or incomplete experiment configs."""


@dataclass
class ExperimentConfig:
    """Validated run description (flat key=value file, documented keys)."""

    method: str
    data_source: str
    seed: int
    out_dir: str | None = None
    scale: float = 1.0
    # data: idx
    idx_train_images: str | None = None
    idx_train_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None
    normal_class: int = 0
    anomaly_class: int = 1
    # data: synth
    synth_image_side: int = 10
    synth_separation: float = 0.6
    synth_jitter: float = 0.08
    synth_test_normal: int = 200
    synth_test_anomaly: int = 200
    # contamination
    alpha: float = 0.05
    n_normal: int = 380
    # architecture
    latent_dim: int = 2
    hidden: tuple[int, ...] = (48, 24)
    disc_hidden: tuple[int, ...] = (32, 16)
    encoder_batchnorm: bool = True
    batch_size: int = 64
    learning_rate: float = 1e-3
    # budgets
    epochs: int = 500
    itsr: refine.ItsrConfig = field(default_factory=refine.ItsrConfig)
    # detection
    rec_quantile: float = detect.REC_QUANTILE_DEFAULT
    prior_quantile: float = detect.PRIOR_QUANTILE_DEFAULT
    checkpoint_every: int = 0          # 0 = auto cadence

    def scaled_epochs(self, epochs: int) -> int:
        return int(round(epochs * self.scale))

    @property
    def scaled_n_normal(self) -> int:
        return max(32, int(round(self.n_normal * self.scale)))

    def total_epochs(self) -> int:
        if self.method == "itsr":
            c = self.itsr
            return (self.scaled_epochs(c.pretrain_epochs)
                    + c.refine_repetitions * self.scaled_epochs(c.refine_epochs_per_rep)
                    + self.scaled_epochs(c.retrain_epochs))
        return self.scaled_epochs(self.epochs)

    def checkpoint_cadence(self) -> int:
        if self.checkpoint_every > 0:
            return self.checkpoint_every
        return max(1, self.total_epochs() // 50)


def _parse_kv_lines(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _take(pairs, key, convert, default=None, required=False):
    if key not in pairs:
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return default
    raw = pairs.pop(key)
    try:
        return convert(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(",") if part.strip())


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a config; nothing trains on a bad config."""
    pairs = _parse_kv_lines(text)
    method = _take(pairs, "method", str, required=True)
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    source = _take(pairs, "data", str, required=True)
    if source not in ("idx", "synth"):
        raise ConfigError(f"data must be 'idx' or 'synth', got {source!r}")
    cfg = ExperimentConfig(
        method=method,
        data_source=source,
        seed=_take(pairs, "seed", int, required=True),
        out_dir=_take(pairs, "out", str),
        scale=_take(pairs, "scale", float, default=1.0),
        idx_train_images=_take(pairs, "idx.train_images", str),
        idx_train_labels=_take(pairs, "idx.train_labels", str),
        idx_test_images=_take(pairs, "idx.test_images", str),
        idx_test_labels=_take(pairs, "idx.test_labels", str),
        normal_class=_take(pairs, "normal_class", int, default=0),
        anomaly_class=_take(pairs, "anomaly_class", int, default=1),
        synth_image_side=_take(pairs, "synth.image_side", int, default=10),
        synth_separation=_take(pairs, "synth.separation", float, default=0.6),
        synth_jitter=_take(pairs, "synth.jitter", float, default=0.08),
        synth_test_normal=_take(pairs, "synth.test_normal", int, default=200),
        synth_test_anomaly=_take(pairs, "synth.test_anomaly", int, default=200),
        alpha=_take(pairs, "alpha", float, default=0.05),
        n_normal=_take(pairs, "n_normal", int, default=380),
        latent_dim=_take(pairs, "latent_dim", int, default=2),
        hidden=_take(pairs, "hidden", _parse_int_tuple, default=(48, 24)),
        disc_hidden=_take(pairs, "disc_hidden", _parse_int_tuple, default=(32, 16)),
        encoder_batchnorm=_take(pairs, "encoder_batchnorm", _parse_bool, default=True),
        batch_size=_take(pairs, "batch_size", int, default=64),
        learning_rate=_take(pairs, "learning_rate", float, default=1e-3),
        epochs=_take(pairs, "epochs", int, default=500),
        rec_quantile=_take(pairs, "rec_quantile", float, default=0.90),
        prior_quantile=_take(pairs, "prior_quantile", float, default=0.10),
        checkpoint_every=_take(pairs, "checkpoint_every", int, default=0),
    )
    try:
        cfg.itsr = refine.ItsrConfig(
            pretrain_epochs=_take(pairs, "itsr.pretrain_epochs", int, default=500),
            refine_repetitions=_take(pairs, "itsr.refine_repetitions", int, default=10),
            refine_epochs_per_rep=_take(pairs, "itsr.refine_epochs", int, default=100),
            retrain_epochs=_take(pairs, "itsr.retrain_epochs", int, default=1000),
            nu=_take(pairs, "itsr.nu", float, default=0.02),
            retrain_quantile=_take(pairs, "itsr.retrain_quantile", float, default=0.8),
            w_anomaly=_take(pairs, "itsr.w_anomaly", float, default=-0.1),
            batch_size=cfg.batch_size,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if pairs:
        raise ConfigError(f"unknown keys: {sorted(pairs)}")
    if source == "idx":
        for key in ("idx_train_images", "idx_train_labels",
                    "idx_test_images", "idx_test_labels"):
            if getattr(cfg, key) is None:
                raise ConfigError(f"data = idx requires idx.{key.split('_', 1)[1]}")
    if not 0.0 <= cfg.alpha < 1.0:
        raise ConfigError("alpha must lie in [0, 1)")
    if cfg.scale < 0.0:
        raise ConfigError("scale must be nonnegative")
    if not 0.0 <= cfg.rec_quantile <= 1.0 or not 0.0 <= cfg.prior_quantile <= 1.0:
        raise ConfigError("detection quantiles must lie in [0, 1]")
    if cfg.latent_dim < 1 or cfg.batch_size < 1 or cfg.epochs < 0:
        raise ConfigError("latent_dim/batch_size/epochs out of range")
    if cfg.normal_class == cfg.anomaly_class:
        raise ConfigError("normal_class and anomaly_class must differ")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_echo(cfg: ExperimentConfig) -> str:
    """Normalized key=value dump; with the seed it fully determines a run."""
    lines = [
        f"method = {cfg.method}",
        f"data = {cfg.data_source}",
        f"seed = {cfg.seed}",
        f"scale = {cfg.scale!r}",
        f"normal_class = {cfg.normal_class}",
        f"anomaly_class = {cfg.anomaly_class}",
        f"alpha = {cfg.alpha!r}",
        f"n_normal = {cfg.n_normal}",
        f"latent_dim = {cfg.latent_dim}",
        f"hidden = {','.join(map(str, cfg.hidden))}",
        f"disc_hidden = {','.join(map(str, cfg.disc_hidden))}",
        f"encoder_batchnorm = {str(cfg.encoder_batchnorm).lower()}",
        f"batch_size = {cfg.batch_size}",
        f"learning_rate = {cfg.learning_rate!r}",
        f"epochs = {cfg.epochs}",
        f"itsr.pretrain_epochs = {cfg.itsr.pretrain_epochs}",
        f"itsr.refine_repetitions = {cfg.itsr.refine_repetitions}",
        f"itsr.refine_epochs = {cfg.itsr.refine_epochs_per_rep}",
        f"itsr.retrain_epochs = {cfg.itsr.retrain_epochs}",
        f"itsr.nu = {cfg.itsr.nu!r}",
        f"itsr.retrain_quantile = {cfg.itsr.retrain_quantile!r}",
        f"itsr.w_anomaly = {cfg.itsr.w_anomaly!r}",
        f"rec_quantile = {cfg.rec_quantile!r}",
        f"prior_quantile = {cfg.prior_quantile!r}",
        f"checkpoint_every = {cfg.checkpoint_every}",
    ]
    if cfg.data_source == "idx":
        lines += [
            f"idx.train_images = {cfg.idx_train_images}",
            f"idx.train_labels = {cfg.idx_train_labels}",
            f"idx.test_images = {cfg.idx_test_images}",
            f"idx.test_labels = {cfg.idx_test_labels}",
        ]
    else:
        lines += [
            f"synth.image_side = {cfg.synth_image_side}",
            f"synth.separation = {cfg.synth_separation!r}",
            f"synth.jitter = {cfg.synth_jitter!r}",
            f"synth.test_normal = {cfg.synth_test_normal}",
            f"synth.test_anomaly = {cfg.synth_test_anomaly}",
        ]
    return "\n".join(lines) + "\n"


@dataclass
class PreparedData:
    train_images: np.ndarray
    train_anomaly_mask: np.ndarray
    observed: data.ImageDataset
    unobserved: data.ImageDataset | None
    input_dim: int


def prepare_data(cfg: ExperimentConfig, rng: np.random.Generator) -> PreparedData:
    if cfg.data_source == "idx":
        train = data.read_idx(cfg.idx_train_images, cfg.idx_train_labels)
        test = data.read_idx(cfg.idx_test_images, cfg.idx_test_labels)
        spec = data.ContaminationSpec(cfg.normal_class, cfg.anomaly_class,
                                      cfg.alpha, cfg.scaled_n_normal)
        train_set, mask = data.build_contaminated_train(train, spec, rng)
        split = data.build_test_splits(test, cfg.normal_class, cfg.anomaly_class)
        return PreparedData(train_set.images, mask, split.observed, split.unobserved,
                            train_set.images.shape[1])
    n_normal = cfg.scaled_n_normal
    spec = data.ContaminationSpec(0, 1, cfg.alpha, n_normal)
    train_set = data.synth_blobs(n_normal, spec.n_anomaly, cfg.synth_separation,
                                 cfg.synth_image_side, rng, jitter=cfg.synth_jitter)
    order = rng.permutation(len(train_set))
    train_set = train_set.subset(order)
    observed = data.synth_blobs(cfg.synth_test_normal, cfg.synth_test_anomaly,
                                cfg.synth_separation, cfg.synth_image_side, rng,
                                jitter=cfg.synth_jitter)
    return PreparedData(train_set.images, train_set.labels == 1, observed, None,
                        train_set.images.shape[1])


@dataclass
class RunArtifact:
    """Everything a finished run produced, before and after hitting disk."""

    config: ExperimentConfig
    model: models.AaeModel
    thresholds: detect.Thresholds
    reports: dict[tuple[str, str], detect.DetectionReport]   # (split, criterion)
    phase_rows: list[refine.PhaseLogRow]
    checkpoint_rows: list[tuple[int, str, float, float, float]]
    out_dir: str | None


def _model_spec(cfg: ExperimentConfig, input_dim: int) -> models.AutoencoderSpec:
    return models.AutoencoderSpec(input_dim, cfg.latent_dim, cfg.hidden,
                                  encoder_batchnorm=cfg.encoder_batchnorm,
                                  epochs=cfg.total_epochs())


def _stats_to_row(phase, repetition, epoch, stats, candidate_count=0):
    normal = (stats.class_errors or {}).get(0, (0.0, 0.0, 0))
    anomaly = (stats.class_errors or {}).get(1, (0.0, 0.0, 0))
    return refine.PhaseLogRow(phase, repetition, epoch,
                              normal[0], normal[1], normal[2],
                              anomaly[0], anomaly[1], anomaly[2],
                              candidate_count, stats.pos_loss_mass, stats.neg_loss_mass)


def _train(cfg: ExperimentConfig, prepared: PreparedData, rng):
    """Train per the configured method, logging curves and checkpoints."""
    spec = _model_spec(cfg, prepared.input_dim)
    labels = prepared.train_anomaly_mask.astype(int)
    criterion = METHOD_CRITERION[cfg.method]
    cadence = cfg.checkpoint_cadence()
    total = cfg.total_epochs()
    phase_rows: list[refine.PhaseLogRow] = []
    checkpoint_rows: list[tuple[int, str, float, float, float]] = []

    def checkpoint(model, epoch):
        if epoch % cadence and epoch != total:
            return
        thresholds = detect.calibrate(model, prepared.train_images,
                                      cfg.rec_quantile, cfg.prior_quantile)
        scores = detect.classify(model, thresholds, prepared.observed.images, criterion)
        report = detect.evaluate(scores.verdicts,
                                 data.is_anomaly(prepared.observed, cfg.normal_class))
        checkpoint_rows.append((epoch, "observed", report.tpr, report.tnr, report.bacc))

    if cfg.method == "itsr":
        c = cfg.itsr
        itsr_cfg = refine.ItsrConfig(
            pretrain_epochs=cfg.scaled_epochs(c.pretrain_epochs),
            refine_repetitions=c.refine_repetitions,
            refine_epochs_per_rep=cfg.scaled_epochs(c.refine_epochs_per_rep),
            retrain_epochs=cfg.scaled_epochs(c.retrain_epochs),
            nu=c.nu, retrain_quantile=c.retrain_quantile,
            w_anomaly=c.w_anomaly, batch_size=cfg.batch_size)

        def on_epoch(state, phase):
            checkpoint(state.model, state.epoch)

        state = refine.run_itsr(prepared.train_images, spec, itsr_cfg, rng,
                                anomaly_mask=prepared.train_anomaly_mask,
                                disc_hidden=cfg.disc_hidden, lr=cfg.learning_rate,
                                epoch_callback=on_epoch)
        return state.model, state.logs, checkpoint_rows

    if cfg.method == "aae":
        model = models.build_adversarial_autoencoder(spec, rng,
                                                     disc_hidden=cfg.disc_hidden)
        train_epoch = models.train_aae_epoch
    else:
        model = models.build_autoencoder(spec, rng)
        train_epoch = models.train_ae_epoch
    optimizers = models.make_optimizers(model, lr=cfg.learning_rate)
    weights = np.ones(prepared.train_images.shape[0])
    for epoch in range(1, total + 1):
        stats = train_epoch(model, prepared.train_images, weights, optimizers, rng,
                            batch_size=cfg.batch_size, labels=labels)
        phase_rows.append(_stats_to_row("train", 0, epoch, stats))
        checkpoint(model, epoch)
    return model, phase_rows, checkpoint_rows


def _float_cell(value: float) -> str:
    return repr(float(value))


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> RunArtifact:
    """Execute one experiment and write its artifacts (if out_dir given)."""
    out_dir = out_dir or cfg.out_dir
    rng = np.random.default_rng(cfg.seed)
    prepared = prepare_data(cfg, rng)
    model, phase_rows, checkpoint_rows = _train(cfg, prepared, rng)
    thresholds = detect.calibrate(model, prepared.train_images,
                                  cfg.rec_quantile, cfg.prior_quantile)

    criteria = ("rec",) if cfg.method == "ae" else detect.CRITERIA
    reports: dict[tuple[str, str], detect.DetectionReport] = {}
    split_scores: dict[str, detect.Scores] = {}
    splits = [("observed", prepared.observed)]
    if prepared.unobserved is not None:
        splits.append(("unobserved", prepared.unobserved))
    for split_name, split_data in splits:
        truth = data.is_anomaly(split_data, cfg.normal_class)
        for criterion in criteria:
            scores = detect.classify(model, thresholds, split_data.images, criterion)
            reports[(split_name, criterion)] = detect.evaluate(scores.verdicts, truth)
            if criterion == METHOD_CRITERION[cfg.method]:
                split_scores[split_name] = scores

    artifact = RunArtifact(cfg, model, thresholds, reports, phase_rows,
                           checkpoint_rows, out_dir)
    if out_dir is not None:
        _write_artifacts(artifact, prepared, split_scores)
    return artifact


def _write_artifacts(artifact: RunArtifact, prepared: PreparedData,
                     split_scores: dict[str, detect.Scores]) -> None:
    cfg = artifact.config
    out = artifact.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, CONFIG_ECHO), "w") as fh:
        fh.write(config_echo(cfg))
    models.save_model(artifact.model, os.path.join(out, MODEL_BIN))

    with open(os.path.join(out, METRICS_CSV), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for (split, criterion), report in sorted(artifact.reports.items()):
            writer.writerow([split, cfg.method, criterion,
                             report.tp, report.fp, report.tn, report.fn,
                             _float_cell(report.tpr), _float_cell(report.tnr),
                             _float_cell(report.bacc),
                             _float_cell(artifact.thresholds.t_rec),
                             _float_cell(artifact.thresholds.t_prior_log)])

    for split_name, scores in split_scores.items():
        truth = data.is_anomaly(prepared.observed if split_name == "observed"
                                else prepared.unobserved, cfg.normal_class)
        detect.write_scores_csv(os.path.join(out, f"scores_{split_name}.csv"),
                                scores, truth.astype(int))

    payload = {
        "phase_rows": [[r.phase, r.repetition, r.epoch,
                        r.normal_err_mean, r.normal_err_sd, r.normal_count,
                        r.anomaly_err_mean, r.anomaly_err_sd, r.anomaly_count,
                        r.candidate_count, r.pos_loss_mass, r.neg_loss_mass]
                       for r in artifact.phase_rows],
        "checkpoints": [list(row) for row in artifact.checkpoint_rows],
    }
    with open(os.path.join(out, LOGS_JSON), "w") as fh:
        json.dump(payload, fh)
    emit_curves(out)


def emit_curves(artifact_dir: str) -> None:
    """(Re)write the curve CSVs from an artifact's raw logs."""
    logs_path = os.path.join(artifact_dir, LOGS_JSON)
    with open(logs_path) as fh:
        payload = json.load(fh)
    rows = [refine.PhaseLogRow(*row) for row in payload["phase_rows"]]
    refine.write_phase_log_csv(rows, os.path.join(artifact_dir, CURVES_TRAIN_CSV))
    with open(os.path.join(artifact_dir, CURVES_CHECKPOINTS_CSV), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHECKPOINT_HEADER)
        for epoch, split, tpr, tnr, bacc in payload["checkpoints"]:
            writer.writerow([epoch, split, _float_cell(tpr), _float_cell(tnr),
                             _float_cell(bacc)])


def _read_echo(artifact_dir: str) -> dict[str, str]:
    with open(os.path.join(artifact_dir, CONFIG_ECHO)) as fh:
        return _parse_kv_lines(fh.read())


def compare_runs(artifact_dirs, out_path) -> None:
    """Tabulate finished runs: one row per method and split, fixed order."""
    if len(artifact_dirs) < 2:
        raise ValueError("need at least two artifacts to compare")
    echoes = [_read_echo(d) for d in artifact_dirs]
    reference = echoes[0]
    for directory, echo in zip(artifact_dirs[1:], echoes[1:]):
        for key in _DATA_KEYS:
            if echo.get(key) != reference.get(key):
                raise ValueError(
                    f"{directory} was run on different data: {key} = "
                    f"{echo.get(key)!r} vs {reference.get(key)!r}")

    entries = []
    split_sets = []
    for directory, echo in zip(artifact_dirs, echoes):
        method = echo["method"]
        canonical = METHOD_CRITERION[method]
        splits = set()
        with open(os.path.join(directory, METRICS_CSV), newline="") as fh:
            for row in csv.DictReader(fh):
                splits.add(row["split"])
                if row["criterion"] != canonical:
                    continue
                entries.append((METHODS.index(method), row["split"], method,
                                canonical, row["tpr"], row["tnr"], row["bacc"]))
        split_sets.append(splits)
    if any(s != split_sets[0] for s in split_sets):
        raise ValueError(f"artifacts expose mismatched splits: {split_sets}")

    entries.sort(key=lambda e: (e[0], e[1]))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_HEADER)
        for _, split, method, criterion, tpr, tnr, bacc in entries:
            writer.writerow([method, split, criterion, tpr, tnr, bacc])
