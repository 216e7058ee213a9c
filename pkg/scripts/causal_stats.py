#!/usr/bin/env python3
"""
DeVLBert Causal Stats v1.0
Ajuste backdoor discreto a partir de conteos de co-ocurrencia.

  P(Y|X)      = N(x,y) / N(x)
  P(Y|do(X))  = sum_z [N(x,y,z) / N(x,z)] * [N(z) / N_total]

Estratos indefinidos (P(z) > 0 pero N(x,z) = 0) se omiten y los priors se
renormalizan sobre los estratos definidos; la cobertura se reporta.

Entrada: JSON Lines {"x": [...], "y": [...], "z": [...]} (header opcional).

Uso:
  from causal_stats import ingest, read_stats_records, conditional, interventional, report
  table = ingest(read_stats_records("data/planted/stats.jsonl"))
  print(conditional(table, "shirt", "guitar"), interventional(table, "shirt", "guitar"))
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from common import format_table, now_iso
from errors import CorpusFormatError, UndefinedAdjustmentError, UndefinedConditionError, ValidationError

Number = Union[float, Fraction]
Triple = Tuple[str, str, str]

PRESENCE = "presence"
MULTIPLICITY = "multiplicity"


# =============================================================================
# Tabla de co-ocurrencia
# =============================================================================

class CooccurrenceTable:
    """
    Conteos dispersos N(x,y,z). Los marginales se recalculan desde las
    entradas en cada consulta, nunca se guardan.
    """

    def __init__(
        self,
        x_vocab: Optional[Sequence[str]] = None,
        y_vocab: Optional[Sequence[str]] = None,
        z_vocab: Optional[Sequence[str]] = None,
        strict: bool = False,
        counting: str = PRESENCE,
    ):
        if counting not in (PRESENCE, MULTIPLICITY):
            raise ValidationError(f"unknown counting mode '{counting}'")
        if strict and (x_vocab is None or y_vocab is None or z_vocab is None):
            raise ValidationError("strict mode needs x, y and z vocabularies")
        self.x_vocab = list(x_vocab) if x_vocab is not None else None
        self.y_vocab = list(y_vocab) if y_vocab is not None else None
        self.z_vocab = list(z_vocab) if z_vocab is not None else None
        self.strict = strict
        self.counting = counting
        self.counts: Dict[Triple, int] = defaultdict(int)
        self.records = 0

    # ----- escritura -----

    def _check_symbols(self, xs: Iterable[str], ys: Iterable[str], zs: Iterable[str]) -> None:
        if not self.strict:
            return
        errors = []
        for axis, symbols, vocab in (("x", xs, self.x_vocab), ("y", ys, self.y_vocab), ("z", zs, self.z_vocab)):
            unknown = sorted(set(symbols) - set(vocab))
            if unknown:
                errors.append(f"unknown {axis} symbols {unknown}")
        if errors:
            raise ValidationError(errors)

    def add(self, x: str, y: str, z: str, count: int = 1) -> None:
        if count < 0:
            raise ValidationError("counts must be nonnegative")
        self._check_symbols([x], [y], [z])
        if count:
            self.counts[(x, y, z)] += count

    def add_record(self, xs: Sequence[str], ys: Sequence[str], zs: Sequence[str]) -> None:
        """Presencia: un incremento por triple distinto; multiplicidad: uno por ocurrencia."""
        self._check_symbols(xs, ys, zs)
        if self.counting == PRESENCE:
            xs, ys, zs = sorted(set(xs)), sorted(set(ys)), sorted(set(zs))
        for triple in product(xs, ys, zs):
            self.counts[triple] += 1
        self.records += 1

    def scaled(self, k: int) -> "CooccurrenceTable":
        table = CooccurrenceTable(self.x_vocab, self.y_vocab, self.z_vocab, self.strict, self.counting)
        for triple, count in self.counts.items():
            table.counts[triple] = count * k
        table.records = self.records * k
        return table

    # ----- marginales -----

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def n_x(self, x: str) -> int:
        return sum(c for (xx, _, _), c in self.counts.items() if xx == x)

    def n_xy(self, x: str, y: str) -> int:
        return sum(c for (xx, yy, _), c in self.counts.items() if xx == x and yy == y)

    def n_xz(self, x: str, z: str) -> int:
        return sum(c for (xx, _, zz), c in self.counts.items() if xx == x and zz == z)

    def n_xyz(self, x: str, y: str, z: str) -> int:
        return self.counts.get((x, y, z), 0)

    def n_z(self, z: str) -> int:
        return sum(c for (_, _, zz), c in self.counts.items() if zz == z)

    def _symbols(self, axis: int, vocab: Optional[List[str]]) -> List[str]:
        if vocab is not None:
            return list(vocab)
        return sorted({t[axis] for t, c in self.counts.items() if c > 0})

    @property
    def x_symbols(self) -> List[str]:
        return self._symbols(0, self.x_vocab)

    @property
    def y_symbols(self) -> List[str]:
        return self._symbols(1, self.y_vocab)

    @property
    def z_symbols(self) -> List[str]:
        return self._symbols(2, self.z_vocab)

    def to_json(self) -> Dict[str, Any]:
        return {
            "counting": self.counting,
            "records": self.records,
            "counts": [{"x": x, "y": y, "z": z, "n": n} for (x, y, z), n in sorted(self.counts.items()) if n],
        }


def ingest(
    pair_stream: Iterable[Dict[str, Sequence[str]]],
    x_vocab: Optional[Sequence[str]] = None,
    y_vocab: Optional[Sequence[str]] = None,
    z_vocab: Optional[Sequence[str]] = None,
    strict: bool = False,
    counting: str = PRESENCE,
) -> CooccurrenceTable:
    """Pliegue secuencial de registros {"x", "y", "z"} en una tabla."""
    table = CooccurrenceTable(x_vocab, y_vocab, z_vocab, strict, counting)
    for record in pair_stream:
        table.add_record(record["x"], record["y"], record["z"])
    return table


def read_stats_records(path: str) -> Iterator[Dict[str, List[str]]]:
    """Lee un JSONL de estadísticas; el header es opcional. Errores con número de línea."""
    try:
        f = open(path, 'r', encoding='utf-8')
    except FileNotFoundError:
        raise ValidationError(f"stats file not found: {path}") from None
    with f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, line_number, f"invalid JSON ({e.msg})") from None
            if not isinstance(row, dict):
                raise CorpusFormatError(path, line_number, "record must be a JSON object")
            if "header" in row:
                continue
            for key in ("x", "y", "z"):
                value = row.get(key)
                if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                    raise CorpusFormatError(path, line_number, f"'{key}' must be a list of strings")
            yield {"x": row["x"], "y": row["y"], "z": row["z"]}


# =============================================================================
# Consultas
# =============================================================================

def _ratio(num: int, den: int, exact: bool) -> Number:
    return Fraction(num, den) if exact else num / den


def _require_data(table: CooccurrenceTable) -> None:
    if table.total <= 0:
        raise ValidationError("co-occurrence table is empty")


def conditional(table: CooccurrenceTable, y: str, x: str, exact: bool = False) -> Number:
    """P(y|x) = N(x,y) / N(x)."""
    _require_data(table)
    n_x = table.n_x(x)
    if n_x == 0:
        raise UndefinedConditionError(f"P({y}|{x}) undefined: N({x}) = 0")
    return _ratio(table.n_xy(x, y), n_x, exact)


@dataclass
class Adjustment:
    value: Number
    coverage: Number
    defined: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


def adjust(
    table: CooccurrenceTable,
    y: str,
    x: str,
    exact: bool = False,
    z_vocab: Optional[Sequence[str]] = None,
) -> Adjustment:
    """
    Ajuste backdoor con detalle de estratos. `z_vocab` restringe los estratos
    considerados (por defecto todos los z con N(z) > 0).
    """
    _require_data(table)
    total = table.total
    strata = list(z_vocab) if z_vocab is not None else table.z_symbols
    defined, skipped = [], []
    terms: List[Tuple[Number, Number]] = []
    for z in strata:
        n_z = table.n_z(z)
        if n_z == 0:
            continue
        prior = _ratio(n_z, total, exact)
        n_xz = table.n_xz(x, z)
        if n_xz == 0:
            skipped.append(z)
            continue
        defined.append(z)
        terms.append((_ratio(table.n_xyz(x, y, z), n_xz, exact), prior))
    if not terms:
        raise UndefinedAdjustmentError(f"P({y}|do({x})) undefined: no stratum has N({x}, z) > 0")
    mass = sum(p for _, p in terms)
    value = sum(cond * p for cond, p in terms) / mass
    prior_mass = sum(_ratio(table.n_z(z), total, exact) for z in strata if table.n_z(z) > 0)
    return Adjustment(value=value, coverage=mass / prior_mass, defined=defined, skipped=skipped)


def interventional(table: CooccurrenceTable, y: str, x: str, exact: bool = False,
                   z_vocab: Optional[Sequence[str]] = None) -> Number:
    """P(y|do(x)) = sum_z P(y|x,z) P(z), omitiendo estratos indefinidos."""
    return adjust(table, y, x, exact, z_vocab).value


# =============================================================================
# Reporte
# =============================================================================

@dataclass
class ReportRow:
    x: str
    y: str
    conditional: Optional[float]
    interventional: Optional[float]
    ratio: Optional[float]
    coverage: Optional[float]
    error: Optional[str] = None

    @property
    def gap(self) -> float:
        if self.conditional is None or self.interventional is None:
            return float("-inf")
        return abs(self.conditional - self.interventional)

    def to_json(self) -> Dict[str, Any]:
        return {
            "x": self.x,
            "y": self.y,
            "conditional": self.conditional,
            "interventional": self.interventional,
            "ratio": self.ratio,
            "coverage": self.coverage,
            "gap": None if self.error else self.gap,
            "error": self.error,
        }


@dataclass
class StatsReport:
    rows: List[ReportRow]
    counting: str = PRESENCE
    records: int = 0
    generated_at: str = field(default_factory=now_iso)

    def __len__(self) -> int:
        return len(self.rows)

    def to_json(self) -> Dict[str, Any]:
        return {
            "generated_at": self.generated_at,
            "counting": self.counting,
            "records": self.records,
            "pairs": [row.to_json() for row in self.rows],
        }

    def to_text(self) -> str:
        headers = ["x", "y", "P(y|x)", "P(y|do(x))", "ratio", "coverage"]
        rows = [
            [r.x, r.y] + (["-"] * 4 if r.error else [r.conditional, r.interventional,
                                                     r.ratio if r.ratio is not None else "inf", r.coverage])
            for r in self.rows
        ]
        return format_table(headers, rows)


def report(
    table: CooccurrenceTable,
    pairs_of_interest: Sequence[Tuple[str, str]],
    z_vocab: Optional[Sequence[str]] = None,
) -> StatsReport:
    """
    Por cada (x, y): condicional, intervencional, razón y cobertura; ordenado
    por |condicional - intervencional| descendente. Pares indefinidos quedan al final.
    """
    rows = []
    for x, y in pairs_of_interest:
        try:
            cond = float(conditional(table, y, x))
            adjusted = adjust(table, y, x, z_vocab=z_vocab)
        except (UndefinedConditionError, UndefinedAdjustmentError) as e:
            rows.append(ReportRow(x, y, None, None, None, None, error=str(e)))
            continue
        inter = float(adjusted.value)
        rows.append(ReportRow(
            x, y, cond, inter,
            ratio=cond / inter if inter > 0 else None,
            coverage=float(adjusted.coverage),
        ))
    rows.sort(key=lambda r: (-r.gap, r.x, r.y))
    return StatsReport(rows=rows, counting=table.counting, records=table.records)


def write_report(stats_report: StatsReport, json_path: str) -> Tuple[Path, Path]:
    """Escribe el JSON y una tabla .txt al lado."""
    target = Path(json_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'w', encoding='utf-8') as f:
        json.dump(stats_report.to_json(), f, indent=2)
        f.write("\n")
    text_path = target.with_suffix(".txt")
    text_path.write_text(stats_report.to_text(), encoding='utf-8')
    return target, text_path


def read_pairs(path: str) -> List[Tuple[str, str]]:
    """Pares de interés: JSONL {"x", "y"} por línea, o un JSON {"pairs": [...]}."""
    try:
        text = Path(path).read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ValidationError(f"pairs file not found: {path}") from None
    stripped = text.strip()
    if not stripped:
        return []
    try:
        data = json.loads(stripped)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict) and "pairs" in data:
        return _pairs_from_object(path, data["pairs"])
    pairs = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(path, line_number, f"invalid JSON ({e.msg})") from None
        if not isinstance(row, dict) or not isinstance(row.get("x"), str) or not isinstance(row.get("y"), str):
            raise CorpusFormatError(path, line_number, "expected {\"x\": str, \"y\": str}")
        pairs.append((row["x"], row["y"]))
    return pairs


def _pairs_from_object(path: str, entries: Any) -> List[Tuple[str, str]]:
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: 'pairs' must be a list")
    errors = []
    pairs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("x"), str) or not isinstance(entry.get("y"), str):
            errors.append(f"{path}: pairs[{i}] must be {{\"x\": str, \"y\": str}}")
            continue
        pairs.append((entry["x"], entry["y"]))
    if errors:
        raise ValidationError(errors)
    return pairs
