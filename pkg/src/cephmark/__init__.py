"""Cephalometric landmark detection by heatmap regression, on a small numpy autodiff engine."""

__version__ = "0.1.0"
