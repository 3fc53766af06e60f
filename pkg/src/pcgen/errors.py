"""Exception hierarchy shared by all pcgen modules.

Every error carries an ``exit_code`` used by the CLI: 2 for usage/config
problems, 3 for data validation failures, 4 for internal invariant
violations.
"""


class PcgenError(Exception):
    exit_code = 3


# --- configuration / usage -------------------------------------------------

class ConfigError(PcgenError):
    exit_code = 2


class BadConfig(ConfigError):
    pass


class TooLarge(ConfigError):
    pass


class InsufficientDonors(ConfigError):
    pass


class TauOutOfRange(ConfigError):
    pass


class PartAbsent(ConfigError):
    pass


# --- data validation --------------------------------------------------------

class DataError(PcgenError):
    exit_code = 3


class MalformedHeader(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class NonFiniteCoordinate(DataError):
    pass


class IoFailure(DataError):
    pass


class VocabMismatch(DataError):
    pass


class EmptySet(DataError):
    pass


class EmptyInput(DataError):
    pass


class SizeMismatch(DataError):
    pass


class SinglePart(DataError):
    pass


class DegenerateSet(DataError):
    pass


class PartUniversallyAbsent(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


# --- internal invariants ----------------------------------------------------

class InternalError(PcgenError):
    exit_code = 4


class ShapeMismatch(InternalError):
    pass


class StaleCache(InternalError):
    pass


class StepOutOfRange(InternalError):
    pass
