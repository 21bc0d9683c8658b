"""Desk-scale laboratory for untargeted dictionary attacks on speaker verification.

The package covers the full loop: synthetic speaker populations, small
analytically differentiable speaker encoders, threshold calibration,
white-box and query-only master-voice optimization in three attack
domains, playback-chain simulation, and coverage-oriented selection of
attack dictionaries. Everything is seeded and reproducible.
"""

__version__ = "0.1.0"
