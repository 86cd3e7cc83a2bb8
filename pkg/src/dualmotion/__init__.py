"""Synthesis and tuning of synchronized dual-arm motion programs for 5-dof curve tracking."""

__version__ = "0.1.0"
