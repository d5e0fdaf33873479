"""Gaussian-process emulation with an estimated nugget."""
