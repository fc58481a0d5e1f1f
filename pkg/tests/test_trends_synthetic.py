"""Behavioral trend reproduction on the synthetic surrogate corpus.

These mirror the dataset-bound acceptance checks (training-set
degradation, combined-criterion gain, refinement robustness gain) on
procedural blob data, so the mechanisms stay verified even where the
IDX corpora are not installed. Budgets and seeds are fixed; every run
is deterministic.
"""

import numpy as np
import pytest

from itsr import data, detect, experiment, models, refine

SIDE = 10
PIXELS = SIDE * SIDE


def degradation_config(seed):
    cfg = experiment.parse_config(f"""
method = ae
data = synth
seed = {seed}
alpha = 0.05
n_normal = 380
epochs = 300
hidden = 48,24
latent_dim = 4
encoder_batchnorm = false
batch_size = 64
synth.image_side = {SIDE}
synth.separation = 1.0
synth.test_normal = 200
synth.test_anomaly = 200
""")
    return cfg


@pytest.fixture(scope="module")
def itsr_and_aae_runs():
    """Paired refinement/baseline runs on 5%-contaminated blobs, 3 seeds."""
    runs = []
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        train = data.synth_blobs(380, 20, 0.6, SIDE, rng)
        mask = np.asarray(train.labels == 1)
        test = data.synth_blobs(200, 200, 0.6, SIDE, rng)
        spec = models.AutoencoderSpec(PIXELS, 2, hidden=(48, 24),
                                      encoder_batchnorm=True, epochs=0)
        cfg = refine.ItsrConfig(pretrain_epochs=150, refine_repetitions=10,
                                refine_epochs_per_rep=15, retrain_epochs=200,
                                nu=0.05, batch_size=64)
        state = refine.run_itsr(train.images, spec, cfg, rng, anomaly_mask=mask,
                                disc_hidden=(32, 16))
        thresholds = detect.calibrate(state.model, train.images)
        scores = detect.classify(state.model, thresholds, test.images)
        itsr_report = detect.evaluate(scores.verdicts, test.labels == 1)

        rng_b = np.random.default_rng(seed)
        train_b = data.synth_blobs(380, 20, 0.6, SIDE, rng_b)
        test_b = data.synth_blobs(200, 200, 0.6, SIDE, rng_b)
        baseline = models.build_adversarial_autoencoder(spec, rng_b,
                                                        disc_hidden=(32, 16))
        optimizers = models.make_optimizers(baseline)
        weights = np.ones(len(train_b))
        total = cfg.pretrain_epochs + cfg.refine_repetitions * cfg.refine_epochs_per_rep \
            + cfg.retrain_epochs
        for _ in range(total):
            models.train_aae_epoch(baseline, train_b.images, weights, optimizers,
                                   rng_b, batch_size=64)
        thresholds_b = detect.calibrate(baseline, train_b.images)
        scores_b = detect.classify(baseline, thresholds_b, test_b.images)
        aae_report = detect.evaluate(scores_b.verdicts, test_b.labels == 1)
        runs.append((state, mask, itsr_report, aae_report))
    return runs


class TestAutoencoderDegradation:
    """Contaminated training erodes the detector as epochs accumulate."""

    @pytest.fixture(scope="class")
    def checkpoint_runs(self):
        runs = []
        for seed in (0, 1, 2):
            cfg = degradation_config(seed)
            artifact = experiment.run_experiment(cfg)
            runs.append((cfg, artifact))
        return runs

    def test_final_tnr_well_below_early_checkpoint(self, checkpoint_runs):
        drops = []
        for cfg, artifact in checkpoint_runs:
            rows = artifact.checkpoint_rows
            total = cfg.total_epochs()
            early = min(rows, key=lambda r: abs(r[0] - total * 0.1))
            final = rows[-1]
            drops.append(early[3] - final[3])
        assert np.mean(drops) >= 0.05

    def test_balanced_accuracy_degrades_too(self, checkpoint_runs):
        diffs = []
        for cfg, artifact in checkpoint_runs:
            rows = artifact.checkpoint_rows
            total = cfg.total_epochs()
            early = min(rows, key=lambda r: abs(r[0] - total * 0.1))
            diffs.append(early[4] - rows[-1][4])
        assert np.mean(diffs) > 0.0

    def test_anomaly_training_error_catches_up(self, checkpoint_runs):
        # The error gap between hidden classes shrinks with continued
        # training: the network learns the anomalies too.
        for _, artifact in checkpoint_runs:
            rows = artifact.phase_rows
            early = rows[len(rows) // 10]
            late = rows[-1]
            ratio_early = early.anomaly_err_mean / early.normal_err_mean
            ratio_late = late.anomaly_err_mean / late.normal_err_mean
            assert ratio_late < ratio_early


class TestCombinedCriterionGain:
    """On clean data the two scores complement each other."""

    def _run(self, seed, epochs=250):
        rng = np.random.default_rng(seed)
        train = data.synth_blobs(400, 0, 0.0, SIDE, rng, jitter=0.2)
        test_normal = data.synth_blobs(200, 0, 0.0, SIDE, rng, jitter=0.2)
        shape_anomalies = data.synth_blobs(0, 100, 0.0, SIDE, rng,
                                           anomaly_radius_scale=1.7, jitter=0.2)
        moved_anomalies = data.synth_blobs(0, 100, 0.85, SIDE, rng, jitter=0.05)
        images = np.concatenate([test_normal.images, shape_anomalies.images,
                                 moved_anomalies.images])
        truth = np.concatenate([np.zeros(200, bool), np.ones(200, bool)])
        spec = models.AutoencoderSpec(PIXELS, 2, hidden=(48, 24),
                                      encoder_batchnorm=True, epochs=epochs)
        model = models.build_adversarial_autoencoder(spec, rng, disc_hidden=(32, 16))
        optimizers = models.make_optimizers(model)
        weights = np.ones(len(train))
        for _ in range(epochs):
            models.train_aae_epoch(model, train.images, weights, optimizers, rng,
                                   batch_size=64)
        thresholds = detect.calibrate(model, train.images)
        return {criterion: detect.evaluate(
                    detect.classify(model, thresholds, images, criterion).verdicts,
                    truth).bacc
                for criterion in detect.CRITERIA}

    def test_or_combination_does_not_lose_to_either_score(self):
        results = [self._run(seed) for seed in range(5)]
        mean = {k: float(np.mean([r[k] for r in results])) for k in detect.CRITERIA}
        assert mean["combined"] >= max(mean["rec"], mean["prior"]) - 0.02


class TestRefinementRobustnessGain:
    """Refinement beats the plain adversarial baseline on contaminated data."""

    def test_itsr_bacc_exceeds_baseline(self, itsr_and_aae_runs):
        gaps = [itsr_report.bacc - aae_report.bacc
                for _, _, itsr_report, aae_report in itsr_and_aae_runs]
        assert np.mean(gaps) >= 0.03

    def test_candidates_cover_most_true_anomalies(self, itsr_and_aae_runs):
        recalls = []
        for state, mask, _, _ in itsr_and_aae_runs:
            true_anomalies = np.flatnonzero(mask)
            hit = np.intersect1d(state.candidates.flagged, true_anomalies).size
            recalls.append(hit / true_anomalies.size)
        assert np.mean(recalls) >= 0.8

    def test_error_ratio_rises_from_pretrain_to_retrain(self, itsr_and_aae_runs):
        for state, _, _, _ in itsr_and_aae_runs:
            pretrain_end = [r for r in state.logs if r.phase == "pretrain"][-1]
            retrain_end = state.logs[-1]
            assert retrain_end.phase == "retrain"
            ratio_before = pretrain_end.anomaly_err_mean / pretrain_end.normal_err_mean
            ratio_after = retrain_end.anomaly_err_mean / retrain_end.normal_err_mean
            assert ratio_after > ratio_before

    def test_normal_class_error_stays_flat_while_anomalies_blow_up(self, itsr_and_aae_runs):
        # Three-phase trajectory shape: the normal class stays essentially
        # flat (excluded false positives drift a little since they are no
        # longer trained) while the anomaly class error rises by orders of
        # magnitude.
        for state, _, _, _ in itsr_and_aae_runs:
            pretrain_end = [r for r in state.logs if r.phase == "pretrain"][-1]
            retrain_end = state.logs[-1]
            normal_drift = retrain_end.normal_err_mean / pretrain_end.normal_err_mean
            anomaly_rise = retrain_end.anomaly_err_mean / pretrain_end.anomaly_err_mean
            assert normal_drift <= 1.3
            assert anomaly_rise > 3.0 * normal_drift
