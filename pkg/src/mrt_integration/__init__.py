"""Data-integration estimators for micro-randomized trials."""
