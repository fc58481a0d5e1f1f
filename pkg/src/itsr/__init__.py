"""Robust image anomaly detection with adversarial autoencoders.

Training sets contaminated with a small fraction of anomalies degrade
autoencoder-based detectors; this package counters that with latent-prior
likelihood scoring and iterative training-set refinement (ITSR).
"""

__version__ = "0.1.0"
