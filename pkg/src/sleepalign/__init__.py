"""Selective transfer learning for EEG sleep staging.

Pre-train a two-branch multi-resolution CNN on source EEG, score source
batches against the target domain with Earth Mover's Distance, select the
high-reward batches, and fine-tune on those alone.
"""

__version__ = "0.1.0"
