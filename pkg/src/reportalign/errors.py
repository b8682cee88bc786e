"""Error taxonomy shared across the package.

ConfigError and InputError map to CLI exit code 1 (domain error); argparse
usage failures exit 2 on their own.
"""


class ConfigError(ValueError):
    """Invalid configuration value or schema violation."""


class InputError(ValueError):
    """Malformed runtime input (wrong shape, bad token id, empty batch)."""


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable training-step failure."""
