"""Parity harness: recompute dumped operator cases with PyTorch and compare."""

__version__ = "0.1.0"
