"""Map-uncertainty-aware trajectory prediction with proprioceptive gating.

A small numpy reimplementation: a synthetic driving-scene generator, an
online mapper that emits per-vertex bivariate Gaussians, a dual-stream
trajectory predictor and a gate that blends the two streams from the
vehicle's own heading change.
"""

__version__ = "0.1.0"
