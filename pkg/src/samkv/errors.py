"""Exception hierarchy shared by every stage of the pipeline."""


class SamKVError(Exception):
    """Base class; ``stage`` names the pipeline stage that raised."""

    stage = "samkv"

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class ConfigurationError(SamKVError, ValueError):
    stage = "config"


class InputError(SamKVError, ValueError):
    stage = "input"


class CacheError(SamKVError):
    stage = "cache"


class StateError(SamKVError):
    stage = "state"


class ScheduleError(SamKVError):
    stage = "schedule"


class FormatError(SamKVError):
    stage = "format"


class AnalysisError(SamKVError):
    stage = "analysis"


class ComparisonError(SamKVError):
    stage = "compare"
