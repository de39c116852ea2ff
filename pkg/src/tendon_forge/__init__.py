"""Muscle line-of-action extraction, muscle-driven limb dynamics, iLQG
tracking, and marker retargeting."""

__version__ = "0.1.0"
