from __future__ import annotations


class MetaforgeError(RuntimeError):
    pass


class ShapeMismatch(MetaforgeError):
    def __init__(self, message: str, *shapes: tuple[int, ...]) -> None:
        detail = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{message}: {detail}" if shapes else message)
        self.shapes = shapes


class EmptyStructure(MetaforgeError):
    pass


class DegenerateGeometry(MetaforgeError):
    pass


class NonPhysicalBase(MetaforgeError):
    pass


class NotConverged(MetaforgeError):
    pass


class IncompressibleLimit(MetaforgeError):
    pass


class InvalidSampleCount(MetaforgeError):
    pass


class NonScalarLoss(MetaforgeError):
    pass


class NonPositiveStd(MetaforgeError):
    pass


class DegenerateAngle(MetaforgeError):
    pass


class EmptyDataset(MetaforgeError):
    pass


class NumericalDivergence(MetaforgeError):
    pass


class InsufficientSamples(MetaforgeError):
    pass


class DegenerateBounds(MetaforgeError):
    pass


class ConstantTruth(MetaforgeError):
    pass


class ZeroRange(MetaforgeError):
    pass


class ZeroMean(MetaforgeError):
    pass


class ModelModeError(MetaforgeError):
    """Raised when a property head the model was not built with is requested."""
