"""Shared exception types."""


class DomainError(ValueError):
    """An argument violates an operation's contract (bad coordinates,
    point outside a grid, degenerate bbox, feature-count mismatch...)."""


class NoRoadError(DomainError):
    """No road segment passes the class filter for a nearest-road query."""


class ValidationError(Exception):
    """Input files fail schema validation; carries itemized row errors."""

    def __init__(self, message, row_errors=None):
        super().__init__(message)
        self.row_errors = list(row_errors or [])


class PipelineError(Exception):
    """A pipeline stage cannot proceed (no qualifying data, stage abort)."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class HourSkipped(Exception):
    """An hourly fusion fit was skipped; .reason is a machine-readable code."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason
