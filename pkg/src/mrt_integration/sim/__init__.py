"""Simulation model and Monte Carlo harness."""
