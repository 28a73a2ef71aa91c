"""Parasitic-egg localization with a prompt-driven vision-language model."""

__version__ = "0.1.0"
