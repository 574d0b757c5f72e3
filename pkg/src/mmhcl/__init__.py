"""Multimodal hypergraph contrastive recommendation."""
