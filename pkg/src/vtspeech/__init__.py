"""Desk-scale video-text-to-speech lab.

Discrete token pipelines (dMel speech frames, video token grids, characters),
a unified decoder-only transformer with a small autodiff core, an
autoregressive sampler, and phoneme-timing evaluation utilities.
"""

__version__ = "0.1.0"
