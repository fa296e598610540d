"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class LegoError(Exception):
    exit_code = 1


# corpus
class CorpusError(LegoError):
    exit_code = 3


class EmptyText(CorpusError):
    pass


class SameLanguage(CorpusError):
    pass


class DirectionTooSmall(CorpusError):
    pass


# tokenizer
class TokenizerError(LegoError):
    exit_code = 4


class VocabTooSmall(TokenizerError):
    pass


class UnknownLanguageTag(TokenizerError):
    pass


# metric
class LengthMismatch(LegoError):
    exit_code = 5


# tensor core
class TensorError(LegoError):
    exit_code = 6


class ShapeMismatch(TensorError, ValueError):
    pass


class NonScalarLoss(TensorError):
    pass


class MissingGrad(TensorError):
    pass


# branches / composition
class CompositionError(LegoError):
    exit_code = 7


class VocabMismatch(CompositionError):
    pass


class DimMismatch(CompositionError):
    pass


class MissingBranch(CompositionError):
    pass


class FlowDataMismatch(CompositionError):
    pass


# checkpoints
class CheckpointError(LegoError):
    exit_code = 8


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass


# training
class TrainingError(LegoError):
    exit_code = 9


class TrainingAborted(TrainingError):
    pass


class PlanMismatch(TrainingError):
    pass
