"""Synthetic worlds, end-to-end pipeline runs and trajectory metrics."""
