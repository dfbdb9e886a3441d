"""Exception hierarchy of llmgpr.

The command-line interface maps these classes to its exit codes.
"""

from typing import Any, Optional, Sequence


class LLMGPRError(Exception):
    """Base class of all errors raised by this package."""

    exit_code = 1


class UsageError(LLMGPRError, ValueError):
    """Invalid arguments, configuration, or order of pipeline stages."""

    exit_code = 1


class DataError(LLMGPRError, ValueError):
    """Input data that is missing, malformed, or inconsistent."""

    exit_code = 2

    def __init__(self, message: str, rows: Optional[Sequence[Any]] = None) -> None:
        self.rows = list(rows) if rows else []
        if self.rows:
            shown = ", ".join(str(r) for r in self.rows[:10])
            more = "" if len(self.rows) <= 10 else " (+{} more)".format(
                len(self.rows) - 10
            )
            message = "{}: {}{}".format(message, shown, more)
        super().__init__(message)


class DivergenceError(LLMGPRError, RuntimeError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(
        self, stage: str, step: int, last_checkpoint: Optional[str] = None
    ) -> None:
        self.stage = stage
        self.step = step
        self.last_checkpoint = last_checkpoint
        message = "non-finite loss in stage {} at step {}".format(stage, step)
        if last_checkpoint:
            message += "; last good checkpoint kept at {}".format(last_checkpoint)
        super().__init__(message)
