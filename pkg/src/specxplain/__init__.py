"""Explainable CNN toolkit for cough spectrogram classification.

Subpackages cover the full pipeline: ``audio`` turns WAV recordings into
normalized Mel-spectrogram images, ``model`` trains the small CNN on them,
and ``xai``/``segment``/``lime`` explain what the trained network looks at.
Everything runs on the from-scratch autodiff engine in ``tensor``.
"""

from specxplain.tensor import Rng, Tensor, no_grad

__all__ = ["Rng", "Tensor", "no_grad"]
__version__ = "0.1.0"
