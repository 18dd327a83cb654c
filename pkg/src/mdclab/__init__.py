"""Two-description video coding lab: CTU-level Lagrangian bit allocation,
adaptive IDR refresh and an error-detecting decoder over an erasure channel."""

__version__ = "0.1.0"
