"""Schema-guided dialogue state tracking with a pointer-sequence decoder."""

__version__ = "0.1.0"
