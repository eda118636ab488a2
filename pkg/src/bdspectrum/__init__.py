"""Multiscale atlas-guided GCN for brain-disorder identification and spectrum analysis."""

__version__ = "0.1.0"
