"""Object-centric world model toolkit: synthetic multi-object environment,
mask-guided slot encoder, slot-wise state-space dynamics, static/dynamic
feature disentanglement, and the metrics to evaluate all of it."""

__version__ = "0.1.0"
