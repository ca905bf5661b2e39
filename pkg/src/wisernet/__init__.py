"""WaveSDG-style wavelet skip filtering for segmentation, on a numpy autodiff engine."""

__version__ = "0.1.0"
