"""Operational shell: configuration, synthetic data, checkpoints, CLI."""
