"""Deterministic simulator for width- and robustness-customizable federated
learning: independently trained slim base networks are mixed on demand into
models of any supported width, with optional dual-BN adversarial training
for a training-free accuracy/robustness dial."""

__version__ = "0.1.0"
