"""Cascaded 3D networks for vertebra segmentation, localization and identification.

Subpackages and modules:

- ``volume``: CT volumes, label volumes, resampling and bounding boxes
- ``autodiff``: reverse-mode tensors, 3D layers, losses and Adam
- ``nets``: U-Net templates for the semantic and the instance stage
- ``augment``: seeded crop, rotation/scale and noise augmentation
- ``phantom``: synthetic spine phantoms with exact ground truth
- ``pipeline``: the two-stage cascade and anatomical label counting
- ``metrics``: Dice, surface distances, localization and identification
- ``training``: patch samplers, training loops and held-out evaluation
- ``cli``: the ``spinecascade`` command
"""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
