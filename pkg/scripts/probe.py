#!/usr/bin/env python3
"""
DeVLBert Probe v1.0
Diagnóstico del lado del modelo para pares (x, y) de interés.

Para cada par se toman los registros del corpus cuya oración contiene x;
todas las regiones se enmascaran y se mide la probabilidad media de la
clase y en las regiones (clasificador MOM):
  p_present  con x visible
  p_ablated  con x reemplazado por [MASK]
Junto a estos valores se reportan P(y|x) y P(y|do(x)) de causal_stats
cuando existe el stats.jsonl hermano del corpus.

Con todas las regiones enmascaradas el clasificador solo ve x a través de
la co-atención, así que p_present - p_ablated es del orden de 1e-3 en
modelos cortos. La comparación contra el modelo base usa p_present y se
limita a los pares plantados que declara el header del corpus.

Uso:
  from probe import run_probe
  result = run_probe("runs/model.ckpt", "data/planted/corpus.jsonl", pairs)
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from causal_stats import CooccurrenceTable, adjust, conditional, ingest, read_stats_records
from common import format_table, now_iso
from corpus import STATS_FILE, Corpus, load_corpus
from errors import UndefinedAdjustmentError, UndefinedConditionError, ValidationError
from numerics import no_grad, softmax, take
from pretraining import PretrainingHeads
from trainer import load_trained
from two_stream import MaskState, RegionSequence, TokenSequence, TwoStreamBert


def mask_all_regions(regions: RegionSequence) -> RegionSequence:
    states = [MaskState.UNMASKED] + [MaskState.MASKED_TO_MASK] * regions.num_regions
    return RegionSequence(regions.features.copy(), regions.boxes.copy(), regions.soft_labels.copy(), states)


def ablate_word(tokens: TokenSequence, word_id: int) -> TokenSequence:
    states = [
        MaskState.MASKED_TO_MASK if pos > 0 and token == word_id else MaskState.UNMASKED
        for pos, token in enumerate(tokens.ids)
    ]
    return TokenSequence(ids=list(tokens.ids), mask_states=states, is_noun=list(tokens.is_noun))


def class_probability(model: TwoStreamBert, heads: PretrainingHeads, tokens: TokenSequence,
                      regions: RegionSequence, class_id: int) -> float:
    """Probabilidad media de `class_id` sobre las regiones 1..N_v."""
    output = model(tokens, regions)
    positions = list(range(1, len(regions)))
    probs = softmax(heads.mom_classifier(take(output.vis_final, positions, axis=0)), axis=1)
    return float(probs.numpy()[:, class_id].mean())


@dataclass
class ProbeRow:
    x: str
    y: str
    records: int
    p_present: Optional[float]
    p_ablated: Optional[float]
    conditional: Optional[float] = None
    interventional: Optional[float] = None
    baseline_p_present: Optional[float] = None
    planted: bool = False

    @property
    def effect(self) -> Optional[float]:
        if self.p_present is None or self.p_ablated is None:
            return None
        return self.p_present - self.p_ablated

    @property
    def lower_than_baseline(self) -> Optional[bool]:
        if self.p_present is None or self.baseline_p_present is None:
            return None
        return self.p_present < self.baseline_p_present

    def to_json(self) -> Dict[str, Any]:
        return {
            "x": self.x,
            "y": self.y,
            "planted": self.planted,
            "records": self.records,
            "p_present": self.p_present,
            "p_ablated": self.p_ablated,
            "effect": self.effect,
            "conditional": self.conditional,
            "interventional": self.interventional,
            "baseline_p_present": self.baseline_p_present,
            "lower_than_baseline": self.lower_than_baseline,
        }


@dataclass
class ProbeReport:
    rows: List[ProbeRow]
    checkpoint: str
    baseline_checkpoint: Optional[str] = None
    generated_at: str = field(default_factory=now_iso)

    def __len__(self) -> int:
        return len(self.rows)

    def _compared(self) -> List[bool]:
        return [r.lower_than_baseline for r in self.rows if r.planted and r.lower_than_baseline is not None]

    @property
    def planted_compared(self) -> int:
        return len(self._compared())

    @property
    def fraction_lower(self) -> Optional[float]:
        """Fracción de pares plantados con p_present menor que la del modelo base; los genuinos no cuentan."""
        compared = self._compared()
        if not compared:
            return None
        return sum(compared) / len(compared)

    def to_json(self) -> Dict[str, Any]:
        return {
            "generated_at": self.generated_at,
            "checkpoint": self.checkpoint,
            "baseline_checkpoint": self.baseline_checkpoint,
            "planted_pairs_compared": self.planted_compared,
            "fraction_lower_than_baseline": self.fraction_lower,
            "pairs": [row.to_json() for row in self.rows],
        }

    def to_text(self) -> str:
        def cell(value):
            return "-" if value is None else value

        headers = ["x", "y", "plantado", "n", "p(y|x)", "p(y|[MASK])", "P(y|x)", "P(y|do(x))", "base p(y|x)"]
        rows = [
            [r.x, r.y, "sí" if r.planted else "no", r.records, cell(r.p_present), cell(r.p_ablated),
             cell(r.conditional), cell(r.interventional), cell(r.baseline_p_present)]
            for r in self.rows
        ]
        return format_table(headers, rows)


def read_probe_spec(path: str) -> Tuple[List[Tuple[str, str]], Optional[int]]:
    """{"pairs": [{"x", "y"}], "max_records": n} -> (pares, límite por par)."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except FileNotFoundError:
        raise ValidationError(f"probe spec not found: {path}") from None
    if not text.strip():
        return [], None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict) or not isinstance(data.get("pairs", []), list):
        raise ValidationError(f"{path}: expected an object with a 'pairs' list")
    pairs = []
    for i, pair in enumerate(data.get("pairs", [])):
        if not isinstance(pair, dict) or not isinstance(pair.get("x"), str) or not isinstance(pair.get("y"), str):
            raise ValidationError(f"{path}: pairs[{i}] must be {{\"x\": str, \"y\": str}}")
        pairs.append((pair["x"], pair["y"]))
    return pairs, data.get("max_records")


def _check_vocabulary(meta: Dict[str, Any], corpus: Corpus, path: str) -> None:
    if meta.get("vocabulary", {}).get("words") != corpus.vocabulary.to_json()["words"]:
        raise ValidationError(f"{path}: checkpoint vocabulary differs from the corpus vocabulary")
    if meta.get("object_classes") != corpus.object_classes:
        raise ValidationError(f"{path}: checkpoint object classes differ from the corpus classes")


def _model_probabilities(
    checkpoint_path: str,
    corpus: Corpus,
    pairs: Sequence[Tuple[str, str]],
    max_records: Optional[int],
) -> List[Tuple[int, Optional[float], Optional[float]]]:
    model, heads, meta = load_trained(checkpoint_path)
    _check_vocabulary(meta, corpus, checkpoint_path)
    results = []
    with no_grad():
        for x, y in pairs:
            if x not in corpus.vocabulary or y not in corpus.object_classes:
                raise ValidationError(f"probe pair ({x}, {y}) is not in the corpus vocabulary")
            word_id = corpus.vocabulary.id_of(x)
            class_id = corpus.object_classes.index(y)
            present, ablated = [], []
            for record in corpus.records:
                if x not in record.noun_words():
                    continue
                tokens, regions = record.to_sequences(corpus.vocabulary)
                masked_regions = mask_all_regions(regions)
                present.append(class_probability(model, heads, tokens, masked_regions, class_id))
                ablated.append(class_probability(model, heads, ablate_word(tokens, word_id), masked_regions, class_id))
                if max_records is not None and len(present) >= max_records:
                    break
            results.append((
                len(present),
                float(np.mean(present)) if present else None,
                float(np.mean(ablated)) if ablated else None,
            ))
    return results


def _count_statistics(table: Optional[CooccurrenceTable], x: str, y: str) -> Tuple[Optional[float], Optional[float]]:
    if table is None:
        return None, None
    try:
        return float(conditional(table, y, x)), float(adjust(table, y, x).value)
    except (UndefinedConditionError, UndefinedAdjustmentError):
        return None, None


def run_probe(
    checkpoint_path: str,
    corpus_path: str,
    pairs: Sequence[Tuple[str, str]],
    baseline_checkpoint: Optional[str] = None,
    max_records: Optional[int] = None,
) -> ProbeReport:
    if not pairs:
        return ProbeReport(rows=[], checkpoint=checkpoint_path, baseline_checkpoint=baseline_checkpoint)
    corpus = load_corpus(corpus_path, shuffle=False)
    stats_path = Path(corpus_path).parent / STATS_FILE
    table = ingest(read_stats_records(str(stats_path))) if stats_path.exists() else None
    if table is not None and table.total == 0:
        table = None

    main = _model_probabilities(checkpoint_path, corpus, pairs, max_records)
    baseline = _model_probabilities(baseline_checkpoint, corpus, pairs, max_records) if baseline_checkpoint else None

    planted = set(corpus.planted_pairs)
    rows = []
    for i, (x, y) in enumerate(pairs):
        count, p_present, p_ablated = main[i]
        cond, inter = _count_statistics(table, x, y)
        rows.append(ProbeRow(
            x=x, y=y, records=count, p_present=p_present, p_ablated=p_ablated,
            conditional=cond, interventional=inter,
            baseline_p_present=baseline[i][1] if baseline else None,
            planted=(x, y) in planted,
        ))
    return ProbeReport(rows=rows, checkpoint=checkpoint_path, baseline_checkpoint=baseline_checkpoint)


def write_probe_report(probe_report: ProbeReport, json_path: str) -> Tuple[Path, Path]:
    target = Path(json_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'w', encoding='utf-8') as f:
        json.dump(probe_report.to_json(), f, indent=2)
        f.write("\n")
    text_path = target.with_suffix(".txt")
    text_path.write_text(probe_report.to_text(), encoding='utf-8')
    return target, text_path
