"""Sweep harness (placeholder while building)."""
