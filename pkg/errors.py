"""Base exception shared by every fallout module."""


class FalloutError(Exception):
    """Root of all expected (non-bug) failures raised by fallout."""
