#!/usr/bin/env python3
"""
DeVLBert CLI v1.0
Superficie de operación: corpus sintéticos, preentrenamiento, estadísticas
causales y sondeo de modelos entrenados.

Uso:
  python scripts/devlbert_cli.py synth config/planted_spec.json 256 data/planted
  python scripts/devlbert_cli.py pretrain config/run_default.json --preset D-VLC
  python scripts/devlbert_cli.py stats data/planted config/probe_pairs.json --out runs/stats.json
  python scripts/devlbert_cli.py probe runs/model.ckpt data/planted/corpus.jsonl config/probe_pairs.json

Códigos de salida:
  0 éxito | 2 validación | 3 fallo numérico
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from causal_stats import MULTIPLICITY, PRESENCE, ingest, read_pairs, read_stats_records, report, write_report
from common import Colors, log_fail, log_info, log_pass, log_warn, make_header
from corpus import STATS_FILE, generate, load_generator_spec
from errors import EXIT_NUMERIC, EXIT_OK, DevlbertError, ValidationError
from metrics_collector import MetricsStream
from probe import read_probe_spec, run_probe, write_probe_report
from run_config import SEED_ENV, load_run_config
from trainer import PretrainRunner


def _env_seed() -> Optional[int]:
    value = os.environ.get(SEED_ENV)
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got '{value}'") from None


# =============================================================================
# Comandos
# =============================================================================

def cmd_synth(spec_path: str, n: int, out_dir: str, workers: int = 1, seed: Optional[int] = None) -> int:
    """Genera el corpus y muestra el manifest."""
    spec = load_generator_spec(spec_path)
    env_seed = _env_seed()
    if env_seed is not None:
        spec.seed = env_seed
    elif seed is not None:
        spec.seed = seed
    print(make_header(f"SYNTH {Path(spec_path).name} n={n}"))
    manifest = generate(spec, n, out_dir, workers=workers)
    for entry in manifest["files"]:
        log_pass(f"{entry['name']}: {entry['records']} registros sha256={entry['sha256'][:16]}")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(config_path: Optional[str], preset: Optional[str] = None,
                 overrides: Optional[Dict[str, object]] = None, verbose: bool = True) -> int:
    """Pre-pasada de diccionarios, entrenamiento, checkpoint y métricas JSONL."""
    config = load_run_config(config_path, preset=preset, overrides=overrides)
    print(make_header(f"PRETRAIN preset={config.preset or '-'} steps={config.training.steps}"))
    with MetricsStream(config.paths.metrics, append=False) as metrics:
        runner = PretrainRunner(config, metrics=metrics, verbose=verbose)
        log_info(f"Objetivos: {sorted(config.weights())}")
        result = runner.run()
    if result.reports:
        log_info(f"total inicial={result.totals[0]:.4f} final={result.totals[-1]:.4f}")
    log_pass(f"Checkpoint: {result.checkpoint}")
    return EXIT_OK


def _stats_path(corpus_path: str) -> str:
    path = Path(corpus_path)
    if path.is_dir():
        return str(path / STATS_FILE)
    return str(path)


def cmd_stats(corpus_path: str, pairs_path: str, out: Optional[str] = None,
              counting: str = PRESENCE, z_vocab: Optional[Sequence[str]] = None) -> int:
    """Ingesta, reporte ordenado por brecha y escritura JSON + texto."""
    pairs = read_pairs(pairs_path)
    table = ingest(read_stats_records(_stats_path(corpus_path)), counting=counting)
    stats_report = report(table, pairs, z_vocab=z_vocab)
    print(make_header(f"STATS {len(pairs)} pares, {table.records} registros"))
    print(stats_report.to_text())
    if out:
        json_path, text_path = write_report(stats_report, out)
        log_pass(f"Reporte: {json_path} / {text_path}")
    return EXIT_OK


def cmd_probe(checkpoint: str, corpus_path: str, probe_spec: str, baseline: Optional[str] = None,
              out: Optional[str] = None) -> int:
    """Probabilidad enmascarada de y con x presente vs ablacionado, junto a los conteos."""
    pairs, max_records = read_probe_spec(probe_spec)
    probe_report = run_probe(checkpoint, corpus_path, pairs, baseline_checkpoint=baseline, max_records=max_records)
    print(make_header(f"PROBE {Path(checkpoint).name} ({len(pairs)} pares)"))
    print(probe_report.to_text())
    if probe_report.fraction_lower is not None:
        log_info(f"Pares plantados por debajo del modelo base: {probe_report.fraction_lower:.2%} "
                 f"(sobre {probe_report.planted_compared})")
    elif baseline and pairs:
        log_warn("Ningún par plantado del corpus está en la lista; no hay fracción contra el modelo base")
    if out:
        json_path, text_path = write_probe_report(probe_report, out)
        log_pass(f"Reporte: {json_path} / {text_path}")
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="devlbert",
        description="DeVLBert a escala de escritorio",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Ejemplos:
  devlbert synth config/planted_spec.json 256 data/planted
  devlbert pretrain config/run_default.json --preset D-VLC --steps 300
  devlbert stats data/planted config/probe_pairs.json --out runs/stats.json

La variable {SEED_ENV} pisa la semilla de la configuración.
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Genera un corpus sintético con confusores plantados")
    synth.add_argument("spec", help="Spec JSON del generador")
    synth.add_argument("n", type=int, help="Número de pares")
    synth.add_argument("out_dir", help="Directorio de salida")
    synth.add_argument("--workers", type=int, default=1, help="Hilos de generación")
    synth.add_argument("--seed", type=int, default=None, help="Semilla (pisa la de la spec)")

    pretrain = sub.add_parser("pretrain", help="Preentrena con cualquier combinación de diseños")
    pretrain.add_argument("config", nargs="?", default=None, help="RunConfig JSON")
    pretrain.add_argument("--preset", default=None,
                          help="baseline | A-V | A-VL | B-V | C-V | D-V | D-VL | D-VLC")
    pretrain.add_argument("--steps", type=int, default=None)
    pretrain.add_argument("--batch-size", type=int, default=None)
    pretrain.add_argument("--seed", type=int, default=None)
    pretrain.add_argument("--lr", type=float, default=None)
    pretrain.add_argument("--corpus", default=None)
    pretrain.add_argument("--checkpoint", default=None)
    pretrain.add_argument("--metrics", default=None, help="Ruta JSONL o '-' para stdout")
    pretrain.add_argument("--quiet", action="store_true")

    stats = sub.add_parser("stats", help="P(y|x) vs P(y|do(x)) desde conteos")
    stats.add_argument("corpus", help="stats.jsonl o directorio del corpus")
    stats.add_argument("pairs", help="Pares de interés (JSONL o JSON {\"pairs\": [...]})")
    stats.add_argument("--out", default=None, help="Reporte JSON (se escribe también .txt)")
    stats.add_argument("--counting", choices=[PRESENCE, MULTIPLICITY], default=PRESENCE)
    stats.add_argument("--z-vocab", default=None, help="Lista de z separada por comas")

    probe = sub.add_parser("probe", help="Sondeo del modelo entrenado")
    probe.add_argument("checkpoint")
    probe.add_argument("corpus", help="corpus.jsonl")
    probe.add_argument("probe_spec", help="JSON {\"pairs\": [...], \"max_records\": n}")
    probe.add_argument("--baseline-checkpoint", default=None)
    probe.add_argument("--out", default=None)
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "synth":
        return cmd_synth(args.spec, args.n, args.out_dir, workers=args.workers, seed=args.seed)
    if args.command == "pretrain":
        overrides = {
            "training.steps": args.steps,
            "training.batch_size": args.batch_size,
            "training.seed": args.seed,
            "training.lr": args.lr,
            "paths.corpus": args.corpus,
            "paths.checkpoint": args.checkpoint,
            "paths.metrics": args.metrics,
        }
        return cmd_pretrain(args.config, preset=args.preset, overrides=overrides, verbose=not args.quiet)
    if args.command == "stats":
        z_vocab = [z for z in args.z_vocab.split(",") if z] if args.z_vocab else None
        return cmd_stats(args.corpus, args.pairs, out=args.out, counting=args.counting, z_vocab=z_vocab)
    return cmd_probe(args.checkpoint, args.corpus, args.probe_spec, baseline=args.baseline_checkpoint, out=args.out)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except DevlbertError as e:
        log_fail(str(e))
        return e.exit_code
    except Exception as e:
        log_fail(f"{Colors.BOLD}error interno:{Colors.RESET} {type(e).__name__}: {e}")
        return EXIT_NUMERIC


if __name__ == '__main__':
    sys.exit(main())
