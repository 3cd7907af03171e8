"""Exception hierarchy shared by every fedmn module."""


class FedMNError(Exception):
    """Base class for all errors raised by fedmn."""


class ShapeError(FedMNError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ConfigError(FedMNError, ValueError):
    """Invalid configuration value. ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TargetError(FedMNError, ValueError):
    def __init__(self, row, values):
        self.row = row
        super().__init__(f"target row {row} is not one-hot: {list(values)}")


class RoutingError(FedMNError):
    """Raised when a decision vector leaves the network without any output path."""


class DataError(FedMNError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class MetricsError(FedMNError):
    """Missing, truncated or malformed metrics file."""
