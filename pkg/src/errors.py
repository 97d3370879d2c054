"""
Exception hierarchy for the retrieval engine and reasoning pipeline.

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Any, Optional


class PipelineError(Exception):
    """Base error. `partial` carries whatever was produced before the failure."""

    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class ConfigValidationError(PipelineError, ValueError):
    """A PipelineConfig invariant does not hold"""


class IndexFormatError(PipelineError):
    """Corpus or index directory is missing, truncated or malformed"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(f"{message}{location}")
        self.path = path
        self.line = line


class DegenerateVectorError(PipelineError):
    """A pooled or projected vector has zero norm"""


class ParseFailure(PipelineError):
    """Model output does not follow the expected tag contract"""


class TransportFailure(PipelineError):
    """Model endpoint unreachable, timed out, or returned an error status"""

    def __init__(self, message: str, status: Optional[int] = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class FilterError(PipelineError):
    """Stage-2 ranker transport failed after retries; `partial` holds provenance so far"""


class ReasonerError(PipelineError):
    """Answer loop aborted; `partial` holds the AnswerTrace so far"""
