"""Differentiable Bayesian filtering with attention-based multimodal gains.

Filters carry the belief as a latent ensemble; sensor encoders, process
models, and the attention gain are learned end to end through a small
reverse-mode autodiff engine (see ``mdf.autodiff``). ``mdf.simworld``
provides a deterministic multimodal robot-arm environment for training and
evaluation, driven from the ``mdf`` command line tool.
"""

__version__ = "0.1.0"
