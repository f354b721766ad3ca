"""Exception types shared across the pipeline.

The CLI maps these onto distinct exit codes, so stages should raise the
most specific class that applies rather than bare ValueError/RuntimeError.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError, ValueError):
    """A configuration value is invalid or inconsistent with a component."""


class DataError(PipelineError, RuntimeError):
    """Input data could not be used (bad file, bad contents, bad state)."""


class SchemaError(DataError):
    """A manifest or serialized artifact violates its documented schema."""


class DanglingReferenceError(DataError):
    """A manifest entry points at a file that does not exist."""


class GenerationError(PipelineError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class UndefinedMetricError(PipelineError, ValueError):
    """A requested metric is undefined for the given inputs."""
