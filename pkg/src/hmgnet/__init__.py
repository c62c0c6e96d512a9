"""Heterogeneous molecular graph networks for molecular property prediction.

Builds order-{1,2} heterogeneous graphs from molecular geometries, featurizes
distances/lengths/angles with radial basis expansions, and trains a typed
message-passing network whose per-order predictions are fused by an attention
module.
"""

__version__ = "0.1.0"
