"""Desk-scale laboratory for bidirectional compatible training (BiCT):
backward-compatible training of new embedding models, forward-compatible
feature upgrade modules, sequential upgrades with momentum inputs, and
retrieval evaluation with progressive gallery hot-refresh.
"""

__version__ = "0.1.0"
