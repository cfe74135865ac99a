"""Neuron-health transport coupled to amyloid-beta coagulation-diffusion.

Submodules: :mod:`measure` (particle measures, W1), :mod:`kernels` (model
ingredients), :mod:`transport` (characteristics and label weights),
:mod:`smoluchowski` (species kinetics), :mod:`coupling` (marcher and
fixed-point solver), :mod:`config` and :mod:`cli` (runs and presets).
"""
from __future__ import annotations

__version__ = "0.1.0"
