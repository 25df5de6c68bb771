"""Gaussian kernel attention engine.

Submodules: numerics, kernel_attention, baseline_attention, model, streaming,
training, analysis, checkpoint, cli. Import them directly; this package root
stays import-light so the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"
