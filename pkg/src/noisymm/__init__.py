"""Noise-tolerant learning for paired two-modality data.

Modules:

* :mod:`noisymm.tensor` - reverse-mode autodiff on numpy arrays, Adam, gradient checks
* :mod:`noisymm.synthdata` - synthetic datasets, label and correspondence noise, file format
* :mod:`noisymm.model` - encoders, fusion classifier, prototypes, tied autoencoder
* :mod:`noisymm.losses` - instance/category contrastive losses, Sinkhorn targets, hybrid loss
* :mod:`noisymm.correction` - KNN label rectification
* :mod:`noisymm.trainer` - warm-up and the iterative two-phase procedure
* :mod:`noisymm.cli` - ``noisymm generate | train | report``
"""

__version__ = "0.1.0"
