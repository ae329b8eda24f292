"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class PyramidError(Exception):
    exit_code = 1


class ConfigError(PyramidError, ValueError):
    exit_code = 2


class DataError(PyramidError):
    exit_code = 3


class MissingPredictionError(DataError, KeyError):
    """No probability is available for a tile that the execution needs."""

    def __init__(self, tile):
        self.tile = tile
        super().__init__(f"missing prediction for tile level={tile.level} col={tile.col} row={tile.row}")

    def __str__(self) -> str:
        return self.args[0]


class UndefinedMetricError(DataError):
    pass


class UnreachableObjectiveError(DataError):
    def __init__(self, level: int, objective: float):
        self.level = level
        self.objective = objective
        super().__init__(f"no beta reaches isolated retention {objective:.4f} at level {level}")


class IntegrityError(DataError):
    pass


class TransportError(PyramidError):
    exit_code = 4

    def __init__(self, message: str, peer: int | None = None):
        self.peer = peer
        super().__init__(message if peer is None else f"peer {peer}: {message}")
