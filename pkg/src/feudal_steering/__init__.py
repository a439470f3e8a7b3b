"""Hierarchical manager/worker steering-angle prediction with discovered subroutine ids."""

__version__ = "0.1.0"
