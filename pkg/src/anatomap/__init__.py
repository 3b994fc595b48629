"""Few-shot anatomical localization on 3D volumes.

Pipeline: procedural phantoms with known ground truth -> self-supervised
training of a latent coordinate regressor with multi-scale descriptors
-> few-shot landmark localization from k annotated templates -> 3D
boxes and per-slice 2D prompts for downstream segmenters -> metrics.
"""

__version__ = "0.1.0"

from . import augment, errors, locate, metrics, phantom, prompt, train, volume  # noqa: F401
