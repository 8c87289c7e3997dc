"""Joint hard-sample and hard-positive-pair generation for contrastive
representation learning: a pure-numpy training framework with built-in
verification (brute-force loss oracles, finite-difference gradient checks,
linear-probe evaluation harnesses)."""

from . import autodiff, data, losses, nn, optim, oracle, persist, probe, \
    synthdata, trainer, views  # noqa: F401

__version__ = "0.1.0"
