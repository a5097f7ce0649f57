"""Thermal fall detection engine: attention-enhanced 3D convolutional
recurrent models, Farneback motion flow, desk-scale training, and a
real-time streaming pipeline with a 250 ms per-window budget.
"""

__version__ = "0.1.0"
