"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failures onto
its documented process exit status without inspecting messages.
"""


class AnchorGzslError(Exception):
    exit_code = 1


class ConfigError(AnchorGzslError):
    exit_code = 2


class DataError(AnchorGzslError):
    exit_code = 3


class NumericError(AnchorGzslError):
    exit_code = 4


# numerics / nn
class ZeroVector(NumericError, ValueError):
    pass


class DimensionMismatch(NumericError, ValueError):
    pass


class NegativeEntry(NumericError, ValueError):
    pass


class NonScalarOutput(NumericError, ValueError):
    pass


class ZeroGradientNorm(NumericError):
    """Input-gradient norm too small for the penalty's norm derivative.

    ``penalty`` still holds the well-defined penalty value so callers can
    count it while skipping the (undefined) parameter gradient.
    """

    def __init__(self, message, penalty=None):
        super().__init__(message)
        self.penalty = penalty


class NonFiniteValue(NumericError):
    pass


# clustering
class DegenerateClustering(NumericError):
    pass


class UnknownLabel(DataError, KeyError):
    pass


# synthesis / evaluation
class UnknownClass(DataError, KeyError):
    pass


class MissingAttributeTable(ConfigError):
    pass


class UnseenLabelInClLoss(DataError, ValueError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


class EmptyClass(DataError, ValueError):
    pass


class MissingClassInTest(DataError, ValueError):
    pass


# data io
class ParseError(DataError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class MagicMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class RejectionTimeout(DataError):
    pass
