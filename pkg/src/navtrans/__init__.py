"""Instruction-to-behavior-plan translation over navigation graphs."""

__version__ = "0.1.0"
