"""Figure rendering for the gka engine's CSV analysis exports."""

__version__ = "0.1.0"
