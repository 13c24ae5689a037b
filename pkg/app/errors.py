from typing import Optional


class PipelineError(Exception):
    """Base error; carries the process exit code the CLI reports"""

    exit_code = 2

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigurationError(PipelineError):
    """Invalid configuration, flags or arguments"""

    exit_code = 1


class DataError(PipelineError):
    """Input data is missing, malformed or unusable"""

    exit_code = 2


class ManifestError(DataError):
    """A manifest or a file it references could not be loaded"""

    def __init__(self, detail: str, path: str, line: Optional[int] = None):
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{detail} ({location})")
        self.path = path
        self.line = line


class ContractError(DataError):
    """An argument violates an operation's shape or value contract"""


class UndefinedMetricError(DataError):
    """A metric is undefined for the given labels"""


class NumericError(PipelineError):
    """Training diverged (NaN or Inf)"""

    exit_code = 3
