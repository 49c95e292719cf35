"""Desk-scale robot-assisted dressing stack.

Cloth-on-kinematic-arm simulation, segmented partial point-cloud perception,
dense per-point reinforcement learning, and policy distillation, all on numpy
with bitwise-deterministic training.
"""

__version__ = "0.1.0"
