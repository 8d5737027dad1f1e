"""Synthetic experiment harness: data, runs, ablation, CLI."""
