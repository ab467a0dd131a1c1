"""Continual-learning experiment engine."""
