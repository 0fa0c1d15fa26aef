"""Biased over-the-air federated learning: simulator, convergence-bound
evaluation, and statistical-CSI pre-scaler design."""

__version__ = "0.1.0"

from . import baselines, bounds, channel, harness, learner, link, rng, sca  # noqa: F401
