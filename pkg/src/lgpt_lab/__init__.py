"""Desk-scale graph soft-prompting lab.

A graph transformer encoder with early query fusion and learnable pooling
tokens produces continuous prompt vectors for a frozen tiny decoder LM,
trained end to end on synthetic text-attributed-graph QA tasks.
"""

__version__ = "0.1.0"
