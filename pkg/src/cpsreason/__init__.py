"""Cyber-physical event reasoning for a water-distribution testbed.

Stage 1 turns fused process and network data into per-feature polytypic
anomaly flags; stage 2 matches the flag patterns against a signature
database to produce event hypotheses.
"""

__version__ = "0.1.0"
