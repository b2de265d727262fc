"""Compositional few-shot recognition at desk scale."""
