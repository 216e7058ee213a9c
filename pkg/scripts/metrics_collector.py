#!/usr/bin/env python3
"""
DeVLBert Metrics Collector v1.0
Stream de métricas de entrenamiento en JSONL.

METRICS CONTRACT: DEVLBERT-METRICS-V1
- Persistencia: append-only, una línea por entrada, flush en cada escritura
- Destino: archivo o stdout ("-")
- Cada entrada incluye contract, type y timestamp
- El archivo de métricas lleva solo train.step: una línea por paso con el
  LossReport aplanado {step, mlm, mom, align, intervention_*, total}
- Los eventos de ciclo de vida (run.start, dictionary.refresh, run.abort,
  run.end) van al archivo hermano <nombre>.events.jsonl

Uso:
  from metrics_collector import MetricsStream
  with MetricsStream("runs/metrics.jsonl") as metrics:
      metrics.record_step(report.to_dict())
"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO

from common import now_iso

METRICS_CONTRACT = "DEVLBERT-METRICS-V1"
STEP_TYPE = "train.step"
EVENTS_SUFFIX = ".events"


def events_path_for(metrics_path: Optional[str]) -> Optional[str]:
    """runs/metrics.jsonl -> runs/metrics.events.jsonl; sin hermano para stdout o sin destino."""
    if not metrics_path or metrics_path == "-":
        return None
    path = Path(metrics_path)
    return str(path.with_name(f"{path.stem}{EVENTS_SUFFIX}{path.suffix or '.jsonl'}"))


class _JsonlSink:
    """Un destino JSONL con flush por línea."""

    def __init__(self, path: Optional[str], append: bool):
        self._owned = False
        self._stream: Optional[TextIO] = None
        self.lines = 0
        if path == "-":
            self._stream = sys.stdout
        elif path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._stream = open(path, 'a' if append else 'w', encoding='utf-8')
            self._owned = True

    def write(self, entry: Dict[str, Any]) -> None:
        if self._stream is None:
            return
        self._stream.write(json.dumps(entry, ensure_ascii=False) + "\n")
        self._stream.flush()
        self.lines += 1

    def close(self) -> None:
        if self._owned and self._stream is not None:
            self._stream.close()
        self._stream = None


class MetricsStream:
    """Escritor append-only. Sobrevive a abortos porque cada línea se vacía al escribirla."""

    def __init__(self, path: Optional[str] = None, append: bool = True):
        self.path = path
        self.events_path = events_path_for(path)
        self._steps = _JsonlSink(path, append)
        self._events = _JsonlSink(self.events_path, append)

    @property
    def entries_written(self) -> int:
        return self._steps.lines

    @property
    def events_written(self) -> int:
        return self._events.lines

    @staticmethod
    def _create_base_entry(entry_type: str) -> Dict[str, Any]:
        return {
            "contract": METRICS_CONTRACT,
            "type": entry_type,
            "timestamp": now_iso(),
        }

    def record(self, entry_type: str, metrics: Dict[str, Any]) -> None:
        """Evento de ciclo de vida; nunca entra al archivo de pasos."""
        entry = self._create_base_entry(entry_type)
        entry["metrics"] = metrics
        self._events.write(entry)

    def record_step(self, loss_report: Dict[str, Any]) -> None:
        """Una línea por paso con los campos del reporte al nivel superior."""
        entry = self._create_base_entry(STEP_TYPE)
        entry.update(loss_report)
        self._steps.write(entry)

    def record_run_start(self, preset: Optional[str], designs: List[str], steps: int, seed: int) -> None:
        self.record("run.start", {"preset": preset, "designs": designs, "steps": steps, "seed": seed})

    def record_dictionary_refresh(self, step: int, sizes: Dict[str, int], version: int) -> None:
        self.record("dictionary.refresh", {"step": step, "sizes": sizes, "version": version})

    def record_abort(self, step: int, reason: str, diagnostics: Dict[str, Any]) -> None:
        self.record("run.abort", {"step": step, "reason": reason, "diagnostics": diagnostics})

    def record_run_end(self, steps: int, checkpoint: Optional[str]) -> None:
        self.record("run.end", {"steps": steps, "checkpoint": checkpoint})

    def close(self) -> None:
        self._steps.close()
        self._events.close()

    def __enter__(self) -> "MetricsStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class MetricsReader:
    """Lectura y resumen del stream."""

    @staticmethod
    def read_entries(filepath: str, entry_type: Optional[str] = None) -> List[Dict[str, Any]]:
        """Lee entradas con filtro opcional por tipo; ignora líneas corruptas (abortos a media escritura)."""
        entries = []
        path = Path(filepath)
        if not path.exists():
            return entries
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if entry.get("contract") != METRICS_CONTRACT:
                    continue
                if entry_type and entry.get("type") != entry_type:
                    continue
                entries.append(entry)
        return entries

    @staticmethod
    def read_events(metrics_path: str, entry_type: Optional[str] = None) -> List[Dict[str, Any]]:
        """Eventos de ciclo de vida del archivo hermano de `metrics_path`."""
        events_path = events_path_for(metrics_path)
        return MetricsReader.read_entries(events_path, entry_type) if events_path else []

    @staticmethod
    def get_summary(filepath: str) -> Dict[str, Any]:
        steps = MetricsReader.read_entries(filepath, STEP_TYPE)
        totals = [e["total"] for e in steps if "total" in e]
        return {
            "steps": len(steps),
            "first_total": totals[0] if totals else None,
            "last_total": totals[-1] if totals else None,
            "min_total": min(totals) if totals else None,
            "aborted": bool(MetricsReader.read_events(filepath, "run.abort")),
        }
