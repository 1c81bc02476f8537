"""Exception hierarchy shared by all histreg modules."""


class HistregError(Exception):
    """Base class for every error raised by this package."""


class DegenerateRange(HistregError):
    pass


class DegenerateHistogram(HistregError):
    pass


class DegenerateStats(HistregError):
    pass


class InsufficientTissue(HistregError):
    pass


class RankDeficient(HistregError):
    pass


class CoverageGap(HistregError):
    pass


class MissingTile(HistregError):
    pass


class DimensionMismatch(HistregError):
    pass


class TooFewMatches(HistregError):
    pass


class NoConsensus(HistregError):
    pass


class DegenerateWeights(HistregError):
    pass


class SingularSystem(HistregError):
    pass


class EmptyInput(HistregError):
    pass


class RegistrationFailed(HistregError):
    """Registration of a pair could not produce even a rigid transform.

    ``reason`` holds the underlying error and ``diagnostics`` the keypoint
    and match counts collected before the failure.
    """

    def __init__(self, reason, diagnostics=None):
        self.reason = reason
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"{type(reason).__name__}: {reason}")


class ParseError(HistregError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
