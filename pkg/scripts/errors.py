#!/usr/bin/env python3
"""
DeVLBert Errors
Jerarquía de excepciones compartida por todos los módulos.

Cada excepción se traduce a un código de salida del CLI:
  2 -> validación (entrada, configuración, schema, corpus)
  3 -> fallo numérico o contrato interno roto
"""

from typing import Any, Dict, Iterable, List, Optional, Union


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class DevlbertError(Exception):
    """Base de todos los errores del proyecto."""

    exit_code = EXIT_VALIDATION


class ValidationError(DevlbertError):
    """
    Entrada inválida. Acumula todos los problemas encontrados
    (como los validadores que devuelven listas de errores).
    """

    def __init__(self, errors: Union[str, Iterable[str]]):
        if isinstance(errors, str):
            errors = [errors]
        self.errors: List[str] = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "validation failed")


class DimensionError(ValidationError):
    """Formas de tensor incompatibles."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: dimension mismatch {rendered}")


class CorpusFormatError(ValidationError):
    """Línea JSONL mal formada; conserva archivo y número de línea (base 1)."""

    def __init__(self, path: str, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class UndefinedConditionError(ValidationError):
    """Consulta condicional sobre un X sin observaciones."""


class UndefinedAdjustmentError(ValidationError):
    """Todos los estratos del ajuste están indefinidos."""


class NumericError(DevlbertError):
    """NaN o Inf en una pérdida o tensor."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class InternalError(DevlbertError):
    """Contrato interno roto (no debería ocurrir con entradas válidas)."""

    exit_code = EXIT_NUMERIC
