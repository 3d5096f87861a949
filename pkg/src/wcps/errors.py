"""Exception hierarchy shared by all wcps modules."""


class WcpsError(Exception):
    """Base class. ``to_dict`` feeds the CLI's machine-readable stderr."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class ParameterError(WcpsError, ValueError):
    kind = "parameter"


class OrderingError(WcpsError, ValueError):
    kind = "ordering"


class DataError(WcpsError, ValueError):
    kind = "data"


class RangeError(WcpsError, ArithmeticError):
    kind = "range"


class FitError(WcpsError, RuntimeError):
    kind = "fit"

    def __init__(self, message, residual_norm=float("nan")):
        super().__init__(message)
        self.residual_norm = residual_norm

    def to_dict(self):
        d = super().to_dict()
        d["residual_norm"] = self.residual_norm
        return d


class NotFoundError(WcpsError, LookupError):
    """No accepted correlation peak; ``best`` holds the best rejected candidate."""

    kind = "not_found"

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best

    def to_dict(self):
        d = super().to_dict()
        if self.best is not None:
            d["best"] = self.best.to_dict()
        return d


class EstimationError(WcpsError, RuntimeError):
    kind = "estimation"


class TimetagParseError(WcpsError, ValueError):
    kind = "parse"

    def __init__(self, message, offset, expected=None, actual=None):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
        self.expected = expected
        self.actual = actual

    def to_dict(self):
        d = super().to_dict()
        d.update(offset=self.offset, expected=self.expected, actual=self.actual)
        return d


class FrameError(WcpsError, ValueError):
    kind = "frame"


class SessionError(WcpsError, RuntimeError):
    kind = "session"


class PeerLost(SessionError):
    kind = "peer_lost"
