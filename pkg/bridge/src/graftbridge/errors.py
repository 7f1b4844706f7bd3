"""Exception hierarchy for the bridge."""


class BridgeError(Exception):
    """Base class for all bridge failures."""


class DataError(BridgeError):
    """Malformed, inconsistent, or unsupported input artifacts."""
