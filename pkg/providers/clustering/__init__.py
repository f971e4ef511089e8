"""Clusterer providers."""
