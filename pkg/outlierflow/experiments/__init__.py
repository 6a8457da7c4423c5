"""Experiment drivers built on the core package."""
