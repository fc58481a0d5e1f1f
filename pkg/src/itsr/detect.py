"""Threshold calibration, the combined anomaly decision, and metrics.

A sample is an anomaly when its reconstruction error exceeds the
training-quantile threshold OR its latent log-density falls below the
training-quantile likelihood threshold. Thresholds compare strictly, so
boundary scores stay normal. Likelihoods live in log space throughout;
the verdicts are identical to thresholding raw densities.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import models, nn

REC_QUANTILE_DEFAULT = 0.90
PRIOR_QUANTILE_DEFAULT = 0.10

CRITERIA = ("rec", "prior", "combined")

SCORES_CSV_HEADER = ["index", "reconstruction_error", "log_density", "verdict",
                     "hidden_label"]


@dataclass(frozen=True)
class Thresholds:
    """Decision thresholds calibrated on training data only."""

    t_rec: float
    t_prior_log: float
    rec_quantile: float = REC_QUANTILE_DEFAULT
    prior_quantile: float = PRIOR_QUANTILE_DEFAULT


@dataclass(frozen=True)
class Scores:
    """Per-sample anomaly scores plus the resulting verdicts."""

    reconstruction_errors: np.ndarray
    log_densities: np.ndarray
    verdicts: np.ndarray          # boolean, True = anomaly


@dataclass(frozen=True)
class DetectionReport:
    """Confusion counts and balanced-accuracy style rates.

    Rates are NaN (with the matching *_defined flag cleared) when their
    denominator class is absent.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    tnr: float
    bacc: float
    tpr_defined: bool
    tnr_defined: bool


def calibrate(model: models.AaeModel, train_images,
              rec_quantile: float = REC_QUANTILE_DEFAULT,
              prior_quantile: float = PRIOR_QUANTILE_DEFAULT) -> Thresholds:
    """Quantile thresholds from the training scores."""
    train_images = nn.as_batch(train_images, model.spec.input_dim)
    if train_images.shape[0] == 0:
        raise ValueError("cannot calibrate on an empty training set")
    errors = models.reconstruction_errors(model, train_images)
    log_dens = models.prior_log_density(model.prior, models.encode(model, train_images))
    return Thresholds(t_rec=nn.quantile(errors, rec_quantile),
                      t_prior_log=nn.quantile(log_dens, prior_quantile),
                      rec_quantile=rec_quantile, prior_quantile=prior_quantile)


def apply_rule(errors, log_densities, thresholds: Thresholds,
               criterion: str = "combined") -> np.ndarray:
    """Anomaly verdicts from precomputed scores (strict inequalities)."""
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    errors = np.asarray(errors, dtype=np.float64)
    log_densities = np.asarray(log_densities, dtype=np.float64)
    by_rec = errors > thresholds.t_rec
    by_prior = log_densities < thresholds.t_prior_log
    if criterion == "rec":
        return by_rec
    if criterion == "prior":
        return by_prior
    return by_rec | by_prior


def classify(model: models.AaeModel, thresholds: Thresholds, batch,
             criterion: str = "combined") -> Scores:
    """Score a batch and apply the decision rule."""
    batch = nn.as_batch(batch, model.spec.input_dim)
    errors = models.reconstruction_errors(model, batch)
    log_dens = models.prior_log_density(model.prior, models.encode(model, batch))
    return Scores(errors, log_dens, apply_rule(errors, log_dens, thresholds, criterion))


def evaluate(verdicts, true_labels) -> DetectionReport:
    """Confusion counts and rates; anomalies are the positive class."""
    v = np.asarray(verdicts, dtype=bool)
    y = np.asarray(true_labels)
    if v.shape != y.shape:
        raise ValueError("verdicts and labels must have equal length")
    if y.dtype != bool:
        uniq = set(np.unique(y).tolist())
        if not uniq <= {0, 1}:
            raise ValueError("labels must be binary")
        y = y.astype(bool)
    tp = int((v & y).sum())
    fp = int((v & ~y).sum())
    tn = int((~v & ~y).sum())
    fn = int((~v & y).sum())
    tpr_defined = (tp + fn) > 0
    tnr_defined = (tn + fp) > 0
    tpr = tp / (tp + fn) if tpr_defined else math.nan
    tnr = tn / (tn + fp) if tnr_defined else math.nan
    bacc = (tpr + tnr) / 2.0 if (tpr_defined and tnr_defined) else math.nan
    return DetectionReport(tp, fp, tn, fn, tpr, tnr, bacc, tpr_defined, tnr_defined)


def write_scores_csv(path, scores: Scores, hidden_labels) -> None:
    """Per-sample score table backing the error-vs-likelihood scatter plots."""
    labels = np.asarray(hidden_labels)
    if labels.shape != scores.verdicts.shape:
        raise ValueError("hidden labels must match the scored batch")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_CSV_HEADER)
        for i in range(scores.verdicts.size):
            writer.writerow([i,
                             repr(float(scores.reconstruction_errors[i])),
                             repr(float(scores.log_densities[i])),
                             "anomaly" if scores.verdicts[i] else "normal",
                             int(labels[i])])
