from __future__ import annotations


class FusionStereoError(Exception):
    """Базовая ошибка пакета; exit_code уходит в код возврата CLI."""

    exit_code: int = 1


class ConfigError(FusionStereoError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Несовпадение размерностей; в сообщении всегда есть имя измерения."""

    def __init__(self, op: str, dim: str, got: object, expected: object) -> None:
        self.op = op
        self.dim = dim
        self.got = got
        self.expected = expected
        super().__init__(f"{op}: dimension {dim} is {got}, expected {expected}")


class DataError(FusionStereoError, ValueError):
    exit_code = 3


class DivergenceError(FusionStereoError, ArithmeticError):
    exit_code = 4
