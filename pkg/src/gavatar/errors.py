"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class NotARotation(EngineError):
    """Matrix failed the orthonormality / determinant check."""


class JointCountMismatch(EngineError):
    pass


class ShapeMismatch(EngineError):
    pass


class SingularBlend(EngineError):
    """Blended skinning transform is not invertible."""


class DegenerateFacet(EngineError):
    """Triangle area below the degeneracy threshold."""


class ParseError(EngineError):
    pass


class ValidationError(EngineError):
    pass


class EmptyCloud(EngineError):
    pass


class NoValidQuadruple(EngineError):
    pass


class DegreeMismatch(EngineError):
    pass


class NoCachedForward(EngineError):
    """backward() called without a cached forward pass."""


class ZeroDirection(EngineError):
    """View direction undefined: point coincides with the camera center."""


class MaxGaussiansExceeded(EngineError):
    pass


class NonFiniteGradient(EngineError):
    pass


class MissingFile(EngineError):
    pass


class SchemaVersionMismatch(EngineError):
    pass


class UnsupportedPlyVariant(EngineError):
    pass


class VersionMismatch(EngineError):
    pass


class CorruptSection(EngineError):
    pass
