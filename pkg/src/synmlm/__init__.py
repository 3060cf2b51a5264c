"""Synthetic-language MLM pretraining experiments.

Controllable pseudo-language corpora, a small from-scratch transformer
stack, downstream pattern-matching tasks, and probes for measuring what
pretraining transferred.
"""

__version__ = "0.1.0"
