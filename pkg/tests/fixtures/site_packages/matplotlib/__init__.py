"""Plotting library."""
