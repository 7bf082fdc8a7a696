"""Artifact emission for dcqr runs."""
