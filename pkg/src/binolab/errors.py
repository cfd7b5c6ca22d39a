"""Exception types shared across the package.

Grouped here so the CLI can map them onto its exit-code contract:
config/usage problems exit 1, runtime/numerical problems exit 2.
"""


class BinolabError(Exception):
    """Base class for all package errors."""


class ConfigError(BinolabError):
    """Invalid, inconsistent, or unknown configuration."""


class ShapeError(BinolabError):
    """Tensor or sequence shapes do not match an operation's contract."""


class NonFiniteInputError(BinolabError):
    """An operation received NaN/Inf where finite values are required."""


class VocabularyError(BinolabError):
    """A token id falls outside the vocabulary range."""


class CorpusError(BinolabError):
    """Corpus file unreadable, empty, or malformed."""


class SequenceLengthError(BinolabError):
    """A token sequence does not fit the model context window."""


class DegenerateDenominator(BinolabError):
    """|log XPPL| fell below the guard epsilon; the score ratio is undefined."""


class ScoringError(BinolabError):
    """A sequence cannot be scored (for example, no scored positions)."""


class NumericalError(BinolabError):
    """Non-finite loss or other unrecoverable numerical failure."""


class CheckpointError(BinolabError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class CheckpointShapeError(CheckpointError):
    """Stored entries disagree with the declared or expected configuration."""


class EvaluationError(BinolabError):
    """Detection metrics requested on unusable input (for example, one class)."""
