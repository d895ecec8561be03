"""Experiment harness: configuration, training, evaluation, benchmarking and the CLI."""
