class ContractError(ValueError):
    """A precondition on an argument was violated."""


class FormatError(ValueError):
    """A file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
