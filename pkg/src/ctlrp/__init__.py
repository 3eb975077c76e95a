"""Contrastive token-level LRP explanations for a BiGCN rumour classifier."""

__version__ = "0.1.0"
