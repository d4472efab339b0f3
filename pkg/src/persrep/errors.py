"""Exception hierarchy shared by every stage of the pipeline."""


class PersRepError(Exception):
    """Base class for all package errors."""


class ConfigError(PersRepError):
    pass


# -- data -------------------------------------------------------------------
class DatasetError(PersRepError):
    pass


class MissingTrainImages(DatasetError):
    pass


class InsufficientTestImages(DatasetError):
    pass


class MaskShapeMismatch(DatasetError):
    pass


class MalformedAnnotation(DatasetError):
    pass


class TooFewInstances(DatasetError):
    pass


class EmptyMask(DatasetError):
    pass


class UnknownInstance(DatasetError):
    pass


class MissingMasks(DatasetError):
    pass


# -- generation --------------------------------------------------------------
class GenerationError(PersRepError):
    pass


class MissingIdentifierToken(GenerationError):
    pass


class MalformedTemplate(GenerationError):
    pass


class ForegroundTooLarge(GenerationError):
    pass


class BackendUnavailable(GenerationError):
    pass


class InsufficientSourceImages(GenerationError):
    pass


class ExternalGeneratorError(GenerationError):
    pass


class MaskerFailure(GenerationError):
    pass


class ShapeMismatch(PersRepError):
    pass


class InvalidTimestep(GenerationError):
    pass


# -- encoder -----------------------------------------------------------------
class EncoderError(PersRepError):
    pass


class EncoderUnavailable(EncoderError):
    pass


class NonFiniteOutput(EncoderError):
    pass


class UnknownTargetMap(EncoderError):
    pass


# -- training ----------------------------------------------------------------
class TrainingError(PersRepError):
    pass


class EmptyPool(TrainingError):
    pass


class InsufficientNegatives(TrainingError):
    pass


class DimensionMismatch(TrainingError):
    pass


class NonPositiveTemperature(TrainingError):
    pass


class MissingHead(TrainingError):
    pass


class EmptyPositives(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


# -- evaluation --------------------------------------------------------------
class EvaluationError(PersRepError):
    pass


class NoPositives(EvaluationError):
    pass


class NoNegatives(EvaluationError):
    pass


class EmptyRetrievalSet(EvaluationError):
    pass


class EmptyRelevance(EvaluationError):
    pass


class EmptyMaskAfterDownscale(EvaluationError):
    pass


class ConstantMap(EvaluationError):
    pass


class MismatchedImageSets(EvaluationError):
    pass


# -- analysis / orchestration ------------------------------------------------
class PoolTooSmall(PersRepError):
    pass


class IncompatibleRuns(PersRepError):
    pass


class StageFailure(PersRepError):
    pass
