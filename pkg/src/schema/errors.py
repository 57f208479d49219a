"""Exception hierarchy for the meta-analysis toolkit."""

from typing import Optional


class MimaError(Exception):
    """Base class for all toolkit errors."""


class InputError(MimaError, ValueError):
    """User-correctable problem with data, configuration or model choice."""


class EvidenceError(InputError):
    """Invalid evidence file content."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        super().__init__(f"{message}, row {row}" if row is not None else message)


class ConfigError(InputError):
    """Invalid run configuration."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"{message}, line {line}" if line is not None else message)


class ModelSpecError(InputError):
    """Model specification that cannot be instantiated on the given evidence."""


class PredictionError(InputError):
    """Prediction requested from a fit that cannot support it."""


class SamplerError(MimaError, RuntimeError):
    """The sampler could not start or continue."""

    def __init__(self, message: str, block: Optional[str] = None):
        self.block = block
        self.message = message
        super().__init__(f"{message} (block '{block}')" if block else message)

    def __reduce__(self):
        # survives the trip back from chain worker processes
        return type(self), (self.message, self.block)
