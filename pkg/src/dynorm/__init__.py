"""Dynamic normalization (DN-B, DN-C) with BN and SE baselines on a small numpy autodiff stack."""

__version__ = "0.1.0"
