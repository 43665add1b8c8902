"""Exception hierarchy.

Everything raised on bad input derives from ``HMSGError`` (itself a
``ValueError``) so callers can catch one class; the CLI maps these to
exit code 1.
"""


class HMSGError(ValueError):
    pass


# graph / schema
class SchemaError(HMSGError):
    pass


class UnknownRelation(HMSGError):
    pass


class UnknownNodeType(HMSGError):
    pass


class IndexOutOfRange(HMSGError):
    pass


class EndpointTypeMismatch(HMSGError):
    pass


class TypeMismatch(HMSGError):
    pass


class NoRelationBetweenTypes(HMSGError):
    pass


class AmbiguousRelation(HMSGError):
    pass


class SchemaMismatch(HMSGError):
    pass


# tensors
class ShapeMismatch(HMSGError):
    pass


class InvalidSegmentIds(HMSGError):
    pass


class NonFiniteInput(HMSGError):
    pass


class NonFiniteGradient(HMSGError):
    pass


class NotScalarLoss(HMSGError):
    pass


class DetachedLoss(HMSGError):
    pass


# model / training
class EmptyGraph(HMSGError):
    pass


class EmptyInput(HMSGError):
    pass


class EmptyMask(HMSGError):
    pass


class LabelOutOfRange(HMSGError):
    pass


class EmptyPairs(HMSGError):
    pass


class InsufficientNonEdges(HMSGError):
    pass


class SamplingCapExceeded(HMSGError):
    pass


# evaluation
class SingleClassSplit(HMSGError):
    pass


class TooFewRows(HMSGError):
    pass


class LengthMismatch(HMSGError):
    pass


class OneClassOnly(HMSGError):
    pass


# persistence / io
class MissingFile(HMSGError):
    pass


class ParseError(HMSGError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class DanglingIndex(HMSGError):
    pass


class CorruptCheckpoint(HMSGError):
    pass


class ConfigMismatch(HMSGError):
    pass


class ConfigError(HMSGError):
    pass
