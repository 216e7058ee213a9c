#!/usr/bin/env python3
"""
DeVLBert Checkpoint
Contenedor binario de parámetros.

Formato:
  magic  b"DVLBCKPT"                  8 bytes
  version                             uint32 little-endian
  header_len                          uint64 little-endian
  header                              JSON utf-8 (sort_keys, determinista)
  payload                             float64 little-endian, registros contiguos

El header lista cada registro {name, shape, offset, count} y un bloque `meta`
libre (configuración del modelo, paso, preset). La carga valida cada forma.
"""

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from errors import ValidationError

MAGIC = b"DVLBCKPT"
VERSION = 1


def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    """
    Escribe el contenedor de forma atómica (tmp + replace).

    Dos llamadas con los mismos arreglos y meta producen bytes idénticos.
    """
    records = []
    payload = []
    offset = 0
    for name, value in arrays.items():
        flat = np.ascontiguousarray(value, dtype="<f8").reshape(-1)
        records.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "count": int(flat.size)})
        payload.append(flat.tobytes())
        offset += flat.size * 8

    header = json.dumps({"meta": meta or {}, "records": records}, sort_keys=True, separators=(",", ":")).encode("utf-8")

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)
    os.replace(tmp, target)
    return target


def read_header(path: str) -> Tuple[Dict[str, Any], int]:
    """Devuelve (header, byte donde empieza el payload)."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {path}") from None
    with f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a checkpoint (bad magic)")
        try:
            (version,) = struct.unpack("<I", f.read(4))
            (header_len,) = struct.unpack("<Q", f.read(8))
        except struct.error:
            raise ValidationError(f"{path}: truncated checkpoint preamble") from None
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        raw = f.read(header_len)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"{path}: corrupt checkpoint header ({e})") from None
    return header, len(MAGIC) + 4 + 8 + header_len


def load_checkpoint(
    path: str,
    expected_shapes: Optional[Dict[str, Tuple[int, ...]]] = None,
    only: Optional[set] = None,
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Lee (meta, arreglos).

    Args:
        expected_shapes: si se da, cada registro presente debe coincidir en forma
        only: subconjunto de nombres a cargar (p.ej. embeddings externos)
    """
    header, start = read_header(path)
    data = Path(path).read_bytes()[start:]

    errors = []
    arrays: Dict[str, np.ndarray] = {}
    for record in header.get("records", []):
        name = record["name"]
        if only is not None and name not in only:
            continue
        shape = tuple(record["shape"])
        count = int(record["count"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            errors.append(f"{name}: shape {shape} does not hold {count} values")
            continue
        if expected_shapes is not None and name in expected_shapes and tuple(expected_shapes[name]) != shape:
            errors.append(f"{name}: checkpoint shape {shape} != model shape {tuple(expected_shapes[name])}")
            continue
        begin = int(record["offset"])
        end = begin + count * 8
        if end > len(data):
            errors.append(f"{name}: payload truncated")
            continue
        arrays[name] = np.frombuffer(data[begin:end], dtype="<f8").astype(np.float64).reshape(shape)
    if errors:
        raise ValidationError(errors)
    return header.get("meta", {}), arrays
