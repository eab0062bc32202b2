"""Exception hierarchy for the emonet package.

Errors are grouped by the CLI exit code they map to: usage/config errors
(exit 1), data errors (exit 2), and numeric failures (exit 3).
"""


class EmonetError(Exception):
    """Base class for all emonet errors."""


class ConfigError(EmonetError):
    """Invalid configuration or command usage (exit code 1)."""


class DataError(EmonetError):
    """Invalid or inconsistent input data (exit code 2)."""


class NumericError(EmonetError):
    """Numeric failure such as divergence or a failed gradient check (exit code 3)."""


# --- corpus ---------------------------------------------------------------

class MissingColumn(DataError):
    pass


class UnknownPartition(DataError):
    pass


class DuplicateSampleId(DataError):
    pass


class EmptyManifest(DataError):
    pass


class UnmappedLabel(DataError):
    pass


class EmptyPartition(DataError):
    pass


# --- audio / dsp ----------------------------------------------------------

class NotWav(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class EmptyAudio(DataError):
    pass


class EmptyBatch(DataError):
    pass


class CorruptFeatureFile(DataError):
    pass


# --- compute core / model -------------------------------------------------

class ShapeMismatch(EmonetError):
    pass


class LabelOutOfRange(EmonetError):
    pass


class AllMasked(EmonetError):
    pass


class DuplicateDomain(EmonetError):
    pass


class UnknownDomain(EmonetError):
    pass


class UnknownRegime(ConfigError):
    pass


class CorruptCheckpoint(DataError):
    pass


class VersionMismatch(DataError):
    pass


# --- trainer --------------------------------------------------------------

class DivergedLoss(NumericError):
    pass


class SingleDomainCategorical(ConfigError):
    pass


# --- evaluation -----------------------------------------------------------

class EmptyMatrix(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MisalignedRuns(DataError):
    pass
