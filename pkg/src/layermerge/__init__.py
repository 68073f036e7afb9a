"""Weight-space model merging with layer-wise adaptive task-vector
coefficients, exercised end to end on a small transformer encoder."""

__version__ = "0.1.0"
