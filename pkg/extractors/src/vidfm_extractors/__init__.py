"""Feature extraction adapters emitting clips in the shared tensor-store format."""

__version__ = "0.1.0"
