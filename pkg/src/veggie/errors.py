"""Exception hierarchy shared across the package."""


class VeggieError(Exception):
    """Base class for domain errors (CLI exits with code 1 on these)."""


class ShapeError(VeggieError, ValueError):
    pass


class DimensionMismatch(ShapeError):
    pass


class MissingFrame(VeggieError):
    def __init__(self, index: int, path=None):
        self.index = index
        msg = f"missing frame index {index}"
        if path is not None:
            msg += f" in {path}"
        super().__init__(msg)


class IoError(VeggieError, OSError):
    pass


class InvalidSampleCount(VeggieError, ValueError):
    pass


class ManifestError(VeggieError):
    pass


class EmptyCondition(VeggieError, ValueError):
    pass


class AlreadyAdapted(VeggieError):
    pass


class InsufficientData(VeggieError):
    pass


class TimestepError(VeggieError, ValueError):
    pass


class AlreadyInflated(VeggieError):
    pass


class MissingTarget(VeggieError):
    pass


class MissingPrerequisite(VeggieError):
    pass


class NotInitialized(VeggieError):
    pass


class GenerationError(VeggieError):
    pass


class StageError(VeggieError):
    def __init__(self, stage: str, cause: BaseException | None = None):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class BackendError(VeggieError):
    pass


class JudgeParseError(VeggieError):
    pass


class MissingOutput(VeggieError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"no model output for record {record_id!r}")


class CheckpointError(VeggieError):
    pass


class ConfigError(VeggieError):
    pass
