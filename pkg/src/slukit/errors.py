"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: config/usage problems exit 1, data and
file-format problems exit 2, numeric failures exit 3.
"""


class SlukitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SlukitError):
    """Invalid configuration value or combination."""


class DataError(SlukitError):
    """Invalid corpus, manifest, or model input data."""


class FormatError(DataError):
    """Malformed on-disk file (feature file, manifest, checkpoint blob)."""


class VocabError(DataError):
    """Tokenizer vocabulary problem (bad id, incompatible vocabularies)."""


class CheckpointError(DataError):
    """Checkpoint cannot be read, or does not match the target model."""


class UnparseableOutputError(DataError):
    """A decoded token sequence carries no recognizable intent."""


class NumericError(SlukitError):
    """Non-finite values or numerically inadmissible inputs."""


class DimensionError(NumericError):
    """Tensor shape mismatch; message names the offending shapes."""


class TapeError(NumericError):
    """Gradient tape misuse (detached graph, repeated backward)."""
