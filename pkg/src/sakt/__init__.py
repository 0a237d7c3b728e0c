"""Self-attentive knowledge tracing implemented on numpy."""

__version__ = "0.1.0"
