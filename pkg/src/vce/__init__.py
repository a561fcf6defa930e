"""Variational convertor-encoder lab.

A small numpy library for one-shot glyph style conversion: an encoder maps a
(target, condition) image pair to latent conversion rules, a convertor applies
sampled rules back onto the condition image, and training alternates
encoder/convertor updates under a large-margin objective.

Subpackages roughly follow the data path:

* :mod:`vce.tensor`, :mod:`vce.nn` - autodiff engine and layers
* :mod:`vce.data` - Omniglot-style ingestion, preprocessing, episode sampling
* :mod:`vce.model` - the encoder/convertor pair and latent plumbing
* :mod:`vce.losses` - KL, Bernoulli conversion, margin and style objectives
* :mod:`vce.training` - three-phase schedule, checkpoints, monitors
* :mod:`vce.evaluation` - held-out NLL, variation grids, comparison reports
* :mod:`vce.cli` - the ``vce`` command
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
