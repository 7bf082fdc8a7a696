"""Simulation designs, metrics and benchmark protocols."""
