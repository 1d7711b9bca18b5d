"""Exception types raised across the pipeline."""


class CellGraphError(Exception):
    """Base class for all pipeline errors."""


class EmptyMask(CellGraphError):
    pass


class MissingColor(CellGraphError):
    pass


class DimMismatch(CellGraphError):
    pass


class SpecError(CellGraphError):
    pass


class FormatError(CellGraphError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class OutOfBounds(CellGraphError):
    pass


class EmptyDistribution(CellGraphError):
    pass


class BudgetMismatch(CellGraphError):
    pass


class EmptyGraph(CellGraphError):
    pass


class ShapeMismatch(CellGraphError):
    pass


class NonScalarLoss(CellGraphError):
    pass


class PatchCountError(CellGraphError):
    pass


class DegenerateDataset(CellGraphError):
    pass


class DivergenceError(CellGraphError):
    pass
