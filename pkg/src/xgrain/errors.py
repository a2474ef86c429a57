"""Shared exception types."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ContractError):
    """Shapes are incompatible for the requested operation."""

    def __init__(self, op: str, *shapes) -> None:
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.shapes = tuple(tuple(s) for s in shapes)
