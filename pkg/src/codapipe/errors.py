"""Exception hierarchy shared by every codapipe module."""


class CodaError(ValueError):
    """Base class for all codapipe errors."""


class NonPositivePart(CodaError):
    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(f"part at index {index} is not strictly positive: {value!r}")


class BasisMismatch(CodaError):
    pass


class LabelMismatch(CodaError):
    pass


class InsufficientRows(CodaError):
    pass


class DimensionError(CodaError):
    pass


class SingularSubset(CodaError):
    pass


class DegenerateDesign(CodaError):
    pass


class DegenerateData(CodaError):
    pass


class NonConvergent(CodaError):
    def __init__(self, message, cells=()):
        self.cells = list(cells)
        super().__init__(message)


class PerplexityUnreachable(CodaError):
    def __init__(self, index, perplexity):
        self.index = index
        self.perplexity = perplexity
        super().__init__(
            f"perplexity {perplexity} cannot be reached for point {index}"
        )


class NumericalOverflow(CodaError):
    pass


class ParseError(CodaError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


class NegativeValue(CodaError):
    pass


class DuplicateEntity(CodaError):
    pass


class ConfigError(CodaError):
    pass
