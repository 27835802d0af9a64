"""Lite transformer for full-page handwritten text recognition.

Library layout:

- :mod:`litehtr.vocab` -- character inventory with structural tokens
- :mod:`litehtr.imaging` -- image tensors, augmentation, zero-padded batches
- :mod:`litehtr.model` -- CNN backbone + transformer encoder/decoder
- :mod:`litehtr.curriculum` -- synthetic block/page generation for staged training
- :mod:`litehtr.training` -- loss, Adam training loop, freeze ladder, checkpoints
- :mod:`litehtr.evaluation` -- Levenshtein alignment and character error rate
- :mod:`litehtr.cli` -- command-line pipeline driver
"""

__version__ = "0.1.0"
