"""Exception hierarchy shared by every module."""


class TvgnnError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(TvgnnError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class IsolatedVertex(TvgnnError, ValueError):
    def __init__(self, vertex):
        super().__init__(f"vertex {vertex} has zero degree")
        self.vertex = vertex


class InvalidSize(TvgnnError, ValueError):
    pass


class InvalidProbability(TvgnnError, ValueError):
    pass


class ParseError(TvgnnError, ValueError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class DanglingVertexId(DimensionMismatch):
    """An edge references a vertex id without a feature row."""


class EmptyCollection(TvgnnError, ValueError):
    pass


class NonFiniteValue(TvgnnError, FloatingPointError):
    pass


class NonScalarLoss(TvgnnError, ValueError):
    pass


class KinkProximity(TvgnnError, ValueError):
    pass


class AsymmetricInput(TvgnnError, ValueError):
    pass


class EmptyVector(TvgnnError, ValueError):
    pass


class EmptyAssignment(TvgnnError, ValueError):
    pass


class EmptyGraph(TvgnnError, ValueError):
    pass


class LabelOutOfRange(TvgnnError, ValueError):
    pass


class NonFiniteLoss(TvgnnError, FloatingPointError):
    def __init__(self, epoch, details=""):
        msg = f"non-finite loss at epoch {epoch}"
        if details:
            msg += f" ({details})"
        super().__init__(msg)
        self.epoch = epoch


class ClassTooSmall(TvgnnError, ValueError):
    pass


class NoisyConfig(TvgnnError, ValueError):
    """Degenerate hyperparameters, e.g. more clusters than vertices."""


class LengthMismatch(TvgnnError, ValueError):
    pass


class NonSquare(TvgnnError, ValueError):
    pass


class ConfigError(TvgnnError, ValueError):
    pass
