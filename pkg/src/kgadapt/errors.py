"""Exception hierarchy shared across the package."""


class KgAdaptError(Exception):
    """Base class for every library error."""


# --- ingestion ---------------------------------------------------------


class IngestError(KgAdaptError):
    pass


class TransportError(IngestError):
    """Network failure that survived the retry budget (incl. exhausted 429 backoff)."""


class ParseError(IngestError):
    """Malformed API page or structurally invalid edge record."""


class IngestIOError(IngestError):
    pass


class EncodingError(IngestError):
    def __init__(self, message, byte_offset=None):
        super().__init__(message)
        self.byte_offset = byte_offset


# --- text pipeline ------------------------------------------------------


class PipelineError(KgAdaptError):
    pass


class EmptyCorpusError(PipelineError):
    pass


class NoTargetsError(PipelineError):
    """Targeted masking asked for a sentence with no subject/object words."""


# --- numerics -----------------------------------------------------------


class ShapeError(KgAdaptError):
    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NoSupervisedPositionsError(KgAdaptError):
    """Cross entropy saw only ignored labels."""


# --- model --------------------------------------------------------------


class ModelError(KgAdaptError):
    pass


class FusionArityError(ModelError):
    pass


class SeqLenError(ModelError):
    pass


class ConfigMismatchError(ModelError):
    pass


class CheckpointFormatError(ModelError):
    pass


# --- training -----------------------------------------------------------


class TrainError(KgAdaptError):
    pass


class ObjectiveDataMismatchError(TrainError):
    pass


class LabelSpaceError(TrainError):
    pass


# --- evaluation ---------------------------------------------------------


class EvalError(KgAdaptError):
    pass


class AlignmentError(EvalError):
    pass


class TagAlphabetError(EvalError):
    pass


class DatasetFormatError(EvalError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
