"""Desk-scale unified low-level vision: a conditional flow-matching DiT on pixel patches."""

__version__ = "0.1.0"
