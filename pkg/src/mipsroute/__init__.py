"""Learned routing on proximity graphs for maximum inner product search."""
