"""Shared exception types mapped to CLI exit codes."""


class ParseError(ValueError):
    """A file or document failed to parse; message names the file and offset."""


class DivergenceError(RuntimeError):
    """An optimization loop diverged; carries the loss trace so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
