"""Latent-group discovery in categorical event sequences.

Pipeline stages: synthetic sequence generation with latent groups,
event encoding (siamese MLP), windowed sequence encoding (transformer
autoencoder), density-based clustering with noise relabeling, a
sliding-window topic-model baseline, and chance-adjusted evaluation.
"""

__version__ = "0.1.0"
