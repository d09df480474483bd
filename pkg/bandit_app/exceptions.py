"""Исключения решателя пуассоновского двурукого бандита."""

from __future__ import annotations


class BanditError(RuntimeError):
    """Базовая ошибка библиотеки."""


class DomainError(BanditError, ValueError):
    """Аргумент вне области определения (отрицательные счётчики, времена, интенсивности)."""


class ImpossibleObservationError(BanditError):
    """Наблюдение невозможно ни при одном атоме априорного распределения."""


class ConfigError(BanditError, ValueError):
    """Нарушен инвариант конфигурации решателя."""


class ConfigParseError(ConfigError):
    def __init__(self, message: str, lineno: int | None = None, key: str | None = None):
        self.lineno = lineno
        self.key = key
        if lineno is not None:
            message = f"строка {lineno}: {message}"
        super().__init__(message)


class StrategyError(BanditError):
    """Таблица стратегии не покрывает достижимое состояние."""

    def __init__(self, message: str, state: tuple[int, int, int, int] | None = None):
        self.state = state
        super().__init__(message)


class ArtifactIOError(BanditError):
    """Ошибка чтения или записи файлов запуска."""
