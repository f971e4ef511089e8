"""Core modules for hsiAdapt."""

from .cube import DomainPair, HyperCube, LabelMap, PatchSet, SplitSpec

__all__ = ["DomainPair", "HyperCube", "LabelMap", "PatchSet", "SplitSpec"]
