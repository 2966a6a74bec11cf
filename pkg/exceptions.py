from typing import Any, Dict, Optional


class VLAError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(VLAError):
    pass


class ShapeError(VLAError):
    """Incompatible tensor shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class StaleTapeError(VLAError):
    pass


class NonFiniteError(VLAError):
    pass


class NoSupervisedPositionsError(VLAError):
    def __init__(self):
        super().__init__("no supervised positions")


class CodecRangeError(VLAError):
    pass


class ParseError(VLAError):
    """A token sequence does not follow the action grammar."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (position {position})")


class ChunkParseError(ParseError):
    def __init__(
        self,
        message: str,
        position: int,
        action_index: Optional[int] = None,
        component_index: Optional[int] = None,
    ):
        self.action_index = action_index
        self.component_index = component_index
        where = []
        if action_index is not None:
            where.append(f"action {action_index}")
        if component_index is not None:
            where.append(f"component {component_index}")
        suffix = f" [{', '.join(where)}]" if where else ""
        super().__init__(f"{message}{suffix}", position)


class BinDecodeError(VLAError):
    pass


class VocabularyError(VLAError):
    def __init__(self, word: str):
        self.word = word
        super().__init__(f"Out-of-vocabulary word: {word!r}")


class SequenceTooLongError(VLAError):
    pass


class SceneSamplingError(VLAError):
    pass


class UnknownTemplateError(VLAError):
    pass


class DatasetFormatError(VLAError):
    pass


class CheckpointVersionError(VLAError):
    pass


class CheckpointChecksumError(VLAError):
    pass


class PretrainingError(VLAError):
    pass


class ProbeError(VLAError):
    pass


class ReportWriteError(VLAError):
    pass


class GateFailure(VLAError):
    """A validation gate did not pass; diagnostics explain by how much."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
