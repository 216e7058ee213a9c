#!/usr/bin/env python3
"""
DeVLBert Common Utilities
Salida de consola compartida (colores, símbolos, headers, tablas alineadas)
y configuración de encoding para Windows.
"""

import os
import sys
from datetime import datetime
from typing import Any, List, Sequence, TextIO

# Configurar encoding para Windows
if sys.platform == 'win32':
    try:
        sys.stdout.reconfigure(encoding='utf-8', errors='replace')
        sys.stderr.reconfigure(encoding='utf-8', errors='replace')
    except AttributeError:
        pass
    # Habilitar colores ANSI en Windows 10+
    os.system('')


def _colors_enabled() -> bool:
    if os.environ.get("NO_COLOR"):
        return False
    return hasattr(sys.stdout, "isatty") and sys.stdout.isatty()


class Colors:
    """Colores ANSI para terminal (vacíos si no hay TTY o NO_COLOR)."""
    _on = _colors_enabled()
    GREEN = '\033[92m' if _on else ''
    RED = '\033[91m' if _on else ''
    YELLOW = '\033[93m' if _on else ''
    BLUE = '\033[94m' if _on else ''
    CYAN = '\033[96m' if _on else ''
    MAGENTA = '\033[95m' if _on else ''
    RESET = '\033[0m' if _on else ''
    BOLD = '\033[1m' if _on else ''


class Symbols:
    """Símbolos compatibles con todas las consolas."""
    CHECK = '[OK]'
    CROSS = '[X]'
    WARN = '[!]'
    INFO = '[i]'
    ARROW = '->'
    LINE_H = '='


def now_iso() -> str:
    """Timestamp ISO local, formato usado en todos los JSONL."""
    return datetime.now().isoformat()


def make_header(title: str, width: int = 60) -> str:
    """Crea un header con bordes ASCII-safe."""
    line = Symbols.LINE_H * width
    return f"\n{Colors.BOLD}{line}\n  {title}\n{line}{Colors.RESET}\n"


def log_pass(msg: str, stream: TextIO = None) -> None:
    """Log de éxito."""
    print(f"{Colors.GREEN}{Symbols.CHECK} PASS:{Colors.RESET} {msg}", file=stream or sys.stdout)


def log_fail(msg: str, stream: TextIO = None) -> None:
    """Log de fallo (a stderr por defecto)."""
    print(f"{Colors.RED}{Symbols.CROSS} FAIL:{Colors.RESET} {msg}", file=stream or sys.stderr)


def log_warn(msg: str, stream: TextIO = None) -> None:
    """Log de advertencia."""
    print(f"{Colors.YELLOW}{Symbols.WARN} WARN:{Colors.RESET} {msg}", file=stream or sys.stdout)


def log_info(msg: str, stream: TextIO = None) -> None:
    """Log de información."""
    print(f"{Colors.BLUE}{Symbols.INFO} INFO:{Colors.RESET} {msg}", file=stream or sys.stdout)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """
    Tabla de texto con columnas alineadas.

    Números alineados a la derecha, texto a la izquierda.
    """
    cells: List[List[str]] = [[_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, text in enumerate(row):
            widths[i] = max(widths[i], len(text))

    numeric = [
        bool(rows) and all(isinstance(row[i], (int, float)) for row in rows)
        for i in range(len(headers))
    ]

    def render(values: Sequence[str]) -> str:
        parts = []
        for i, text in enumerate(values):
            parts.append(text.rjust(widths[i]) if numeric[i] else text.ljust(widths[i]))
        return "  ".join(parts).rstrip()

    lines = [render(headers), "  ".join("-" * w for w in widths)]
    lines.extend(render(row) for row in cells)
    return "\n".join(lines) + "\n"
