"""Exceptions shared across the pipeline, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid configuration (unknown keys, out-of-range values). Exit code 1."""


class DataError(Exception):
    """Invalid or insufficient data (empty datasets, bad records). Exit code 2."""


class GenerationError(DataError):
    """Scene generation failed, e.g. rejection-sampling budget exhausted."""

    def __init__(self, message: str, prompt_id: str | None = None):
        super().__init__(message)
        self.prompt_id = prompt_id


class VerificationError(Exception):
    """A numerical verification check failed. Exit code 3."""


class NumericError(Exception):
    """Non-finite values where finite ones are required."""
