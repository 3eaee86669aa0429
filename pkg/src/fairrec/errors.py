"""Exception hierarchy shared across the package."""


class FairRecError(Exception):
    """Base class for all package errors."""


class ParseError(FairRecError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class EmptyCorpusError(FairRecError, ValueError):
    pass


class SplitInfeasibleError(FairRecError, ValueError):
    pass


class ConfigurationError(FairRecError, ValueError):
    pass


class NotAdjacentError(FairRecError, KeyError):
    pass


class EdgeCoverageError(FairRecError, ValueError):
    def __init__(self, missing, extra):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(
            f"edge weight map does not cover the graph: "
            f"{len(self.missing)} missing {self.missing[:10]}, "
            f"{len(self.extra)} extra {self.extra[:10]}"
        )


class NumericFault(FairRecError, FloatingPointError):
    pass


class UndefinedDiversityError(FairRecError, ValueError):
    pass


class InfeasibleClusteringError(FairRecError, ValueError):
    pass


class UndefinedCorrelationError(FairRecError, ValueError):
    pass


class CompatibilityError(FairRecError, ValueError):
    pass


class FormatError(FairRecError, ValueError):
    """A binary artifact failed its header or checksum validation."""


class DivergenceError(FairRecError, FloatingPointError):
    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history
