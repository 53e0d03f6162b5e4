"""Contrastive pixel-to-point knowledge transfer at desk scale."""
