"""Iterative training-set refinement: pretrain, detect-and-refine, retrain.

Phase 1 trains the adversarial autoencoder on everything with unit
weights. Phase 2 repeatedly fits a one-class SVM to the latent codes of
the still-included samples, excludes the flagged candidates (weight 0),
and keeps training on the reduced set; the candidate set only ever
grows. Phase 3 computes a reconstruction-error quantile over the
candidates and retrains with a negative weight on the candidates above
it, actively pushing their reconstructions and latent likelihoods away
from the normal class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import models, nn, ocsvm

PHASE_LOG_HEADER = ["phase", "repetition", "epoch",
                    "normal_err_mean", "normal_err_sd", "normal_count",
                    "anomaly_err_mean", "anomaly_err_sd", "anomaly_count",
                    "candidate_count", "pos_loss_mass", "neg_loss_mass"]


class RefinementError(RuntimeError):
    """Raised when refinement degenerates (e.g. every sample excluded)."""


@dataclass(frozen=True)
class ItsrConfig:
    """Schedule and hyperparameters for the three refinement phases."""

    pretrain_epochs: int = 500
    refine_repetitions: int = 10
    refine_epochs_per_rep: int = 100
    retrain_epochs: int = 1000
    nu: float = 0.02
    retrain_quantile: float = 0.8
    w_anomaly: float = -0.1
    batch_size: int = 128
    svm_tolerance: float = 1e-6

    def __post_init__(self):
        if self.refine_repetitions < 1:
            raise ValueError("refine_repetitions must be at least 1")
        if not 0.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (0, 1]")
        if not 0.0 < self.retrain_quantile < 1.0:
            raise ValueError("retrain_quantile must lie in (0, 1)")
        if self.w_anomaly >= 0.0:
            raise ValueError("w_anomaly must be negative")
        if min(self.pretrain_epochs, self.refine_epochs_per_rep,
               self.retrain_epochs) < 0:
            raise ValueError("epoch counts must be nonnegative")


@dataclass
class CandidateSet:
    """Cumulative candidate-anomaly indices with per-repetition history."""

    flagged: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    history: list[np.ndarray] = field(default_factory=list)

    def add(self, new_indices: np.ndarray) -> None:
        new = np.setdiff1d(np.asarray(new_indices, dtype=np.int64), self.flagged)
        self.history.append(new)
        self.flagged = np.union1d(self.flagged, new)

    @property
    def count(self) -> int:
        return int(self.flagged.size)


@dataclass
class PhaseLogRow:
    phase: str
    repetition: int
    epoch: int
    normal_err_mean: float
    normal_err_sd: float
    normal_count: int
    anomaly_err_mean: float
    anomaly_err_sd: float
    anomaly_count: int
    candidate_count: int
    pos_loss_mass: float
    neg_loss_mass: float


@dataclass
class RefineDiagnostics:
    """Per-repetition SVM snapshot over the full training set."""

    repetition: int
    gamma: float
    decision_values: np.ndarray   # every sample, including excluded ones
    newly_flagged: np.ndarray


@dataclass
class ItsrState:
    """Mutable run state threaded through the three phases."""

    model: models.AaeModel
    optimizers: dict[str, nn.AdamState]
    weights: np.ndarray
    candidates: CandidateSet
    t_retrain: float | None = None
    logs: list[PhaseLogRow] = field(default_factory=list)
    diagnostics: list[RefineDiagnostics] = field(default_factory=list)
    epoch: int = 0     # global epoch counter across phases


def init_itsr_state(model: models.AaeModel, n_samples: int, lr: float = 1e-3) -> ItsrState:
    if not model.has_discriminator:
        raise ValueError("refinement trains the adversarial variant")
    return ItsrState(model=model, optimizers=models.make_optimizers(model, lr=lr),
                     weights=np.ones(n_samples), candidates=CandidateSet())


def _binary_class_stats(stats: dict | None):
    """(mean, sd, count) for the normal and anomaly side-channel classes."""
    if stats is None:
        return (0.0, 0.0, 0), (0.0, 0.0, 0)
    normal = stats.get(0, (0.0, 0.0, 0))
    anomaly = stats.get(1, (0.0, 0.0, 0))
    return normal, anomaly


def _log_epoch(state: ItsrState, phase: str, repetition: int,
               epoch_stats: models.EpochStats) -> None:
    normal, anomaly = _binary_class_stats(epoch_stats.class_errors)
    state.logs.append(PhaseLogRow(
        phase=phase, repetition=repetition, epoch=state.epoch,
        normal_err_mean=normal[0], normal_err_sd=normal[1], normal_count=normal[2],
        anomaly_err_mean=anomaly[0], anomaly_err_sd=anomaly[1], anomaly_count=anomaly[2],
        candidate_count=state.candidates.count,
        pos_loss_mass=epoch_stats.pos_loss_mass,
        neg_loss_mass=epoch_stats.neg_loss_mass))


def _snapshot_stats(state: ItsrState, images, anomaly_mask) -> models.EpochStats:
    """Eval-mode statistics without any training (zero-epoch phases)."""
    labels = None if anomaly_mask is None else np.asarray(anomaly_mask, dtype=int)
    errors = models.reconstruction_errors(state.model, images)
    class_errors = None
    if labels is not None:
        class_errors = {}
        for label in np.unique(labels):
            errs = errors[labels == label]
            class_errors[int(label)] = (float(errs.mean()), float(errs.std()), int(errs.size))
    return models.EpochStats(0.0, 0.0, 0.0, 0, class_errors=class_errors)


_PHASE_WEIGHT_DOMAINS = {
    "pretrain": lambda w, cfg: np.all(w == 1.0),
    "refine": lambda w, cfg: np.all((w == 0.0) | (w == 1.0)),
    "retrain": lambda w, cfg: np.all((w == 0.0) | (w == 1.0) | (w == cfg.w_anomaly)),
}


def _train_phase(state: ItsrState, images, anomaly_mask, config: ItsrConfig,
                 rng, phase: str, repetition: int, epochs: int,
                 epoch_callback=None) -> None:
    assert _PHASE_WEIGHT_DOMAINS[phase](state.weights, config), \
        f"weights violate the {phase} domain"
    labels = None if anomaly_mask is None else np.asarray(anomaly_mask, dtype=int)
    if epochs == 0:
        _log_epoch(state, phase, repetition, _snapshot_stats(state, images, anomaly_mask))
        return
    for _ in range(epochs):
        stats = models.train_aae_epoch(state.model, images, state.weights,
                                       state.optimizers, rng,
                                       batch_size=config.batch_size, labels=labels)
        state.epoch += 1
        _log_epoch(state, phase, repetition, stats)
        if epoch_callback is not None:
            epoch_callback(state, phase)


def pretrain(state: ItsrState, images, config: ItsrConfig, rng,
             anomaly_mask=None, epoch_callback=None) -> ItsrState:
    """Phase 1: train on the full set with every weight fixed at 1."""
    if not np.all(state.weights == 1.0):
        raise ValueError("pretraining expects unit weights")
    _train_phase(state, images, anomaly_mask, config, rng, "pretrain", 0,
                 config.pretrain_epochs, epoch_callback)
    return state


def detect_and_refine(state: ItsrState, images, config: ItsrConfig, rng,
                      anomaly_mask=None, epoch_callback=None) -> ItsrState:
    """Phase 2: repeatedly flag latent-space outliers and train without them."""
    images = nn.as_batch(images)
    for rep in range(1, config.refine_repetitions + 1):
        included = np.flatnonzero(state.weights == 1.0)
        if included.size < 2:
            raise RefinementError(
                f"only {included.size} samples left before repetition {rep}; "
                f"nu={config.nu} excludes too aggressively for this set")
        codes = models.encode(state.model, images[included])
        gamma = ocsvm.rbf_gamma_heuristic(codes)
        svm = ocsvm.fit_ocsvm(codes, config.nu, gamma, tolerance=config.svm_tolerance)
        flagged = included[ocsvm.predict_candidates(svm, codes)]
        state.candidates.add(flagged)
        state.weights[flagged] = 0.0
        # Excluded samples never enter the fit but are still scored for diagnostics.
        all_codes = models.encode(state.model, images)
        state.diagnostics.append(RefineDiagnostics(
            repetition=rep, gamma=gamma,
            decision_values=ocsvm.decision_values(svm, all_codes),
            newly_flagged=flagged))
        if not np.any(state.weights != 0.0):
            raise RefinementError(
                "every training sample has been excluded; nu is degenerate "
                "for this data")
        _train_phase(state, images, anomaly_mask, config, rng, "refine", rep,
                     config.refine_epochs_per_rep, epoch_callback)
    return state


def retrain(state: ItsrState, images, config: ItsrConfig, rng,
            anomaly_mask=None, epoch_callback=None) -> ItsrState:
    """Phase 3: negative weights on high-error candidates above T_retrain."""
    images = nn.as_batch(images)
    if state.candidates.count == 0:
        _log_epoch(state, "retrain", 0, _snapshot_stats(state, images, anomaly_mask))
        return state
    flagged = state.candidates.flagged
    errors = models.reconstruction_errors(state.model, images[flagged])
    state.t_retrain = nn.quantile(errors, config.retrain_quantile)
    # Ties with the threshold resolve to 0 at numerical resolution, so
    # candidates with equal errors (e.g. duplicate images) are never
    # repelled on rounding dust.
    cut = state.t_retrain * (1.0 + 1e-9) + 1e-15
    state.weights[flagged] = np.where(errors > cut, config.w_anomaly, 0.0)
    _train_phase(state, images, anomaly_mask, config, rng, "retrain", 0,
                 config.retrain_epochs, epoch_callback)
    return state


def run_itsr(images, model_spec: models.AutoencoderSpec, config: ItsrConfig,
             rng: np.random.Generator, anomaly_mask=None,
             disc_hidden: tuple[int, ...] = (1000, 1000), lr: float = 1e-3,
             epoch_callback=None) -> ItsrState:
    """Execute the three phases on a fresh adversarial autoencoder."""
    images = nn.as_batch(images, model_spec.input_dim)
    model = models.build_adversarial_autoencoder(model_spec, rng, disc_hidden=disc_hidden)
    state = init_itsr_state(model, images.shape[0], lr=lr)
    pretrain(state, images, config, rng, anomaly_mask, epoch_callback)
    detect_and_refine(state, images, config, rng, anomaly_mask, epoch_callback)
    retrain(state, images, config, rng, anomaly_mask, epoch_callback)
    return state


def write_phase_log_csv(rows: list[PhaseLogRow], path) -> None:
    """Phase-by-phase training curves (one row per epoch)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PHASE_LOG_HEADER)
        for row in rows:
            writer.writerow([row.phase, row.repetition, row.epoch,
                             repr(row.normal_err_mean), repr(row.normal_err_sd),
                             row.normal_count,
                             repr(row.anomaly_err_mean), repr(row.anomaly_err_sd),
                             row.anomaly_count, row.candidate_count,
                             repr(row.pos_loss_mass), repr(row.neg_loss_mass)])
