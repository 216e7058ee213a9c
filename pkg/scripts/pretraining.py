#!/usr/bin/env python3
"""
DeVLBert Pretraining v1.0
Tareas proxy de preentrenamiento y paso de entrenamiento combinado.

Tareas:
- MLM: predicción de palabras enmascaradas (clasificador comparte la tabla de embeddings)
- MOM: clasificación de regiones enmascaradas contra etiquetas suaves
- Alineación: pares (oración, imagen) alineados vs negativos muestreados
- Objetivos de intervención (diseños A/B/C/D) vía deconfound.InterventionObjective

Uso:
  from pretraining import MaskingPolicy, BatchSampler, PretrainingHeads, training_step
  batch = sampler.next_batch()
  report = training_step(batch, model, heads, weights, optimizer, objectives)
"""

import threading
from dataclasses import asdict, dataclass, field, fields
from queue import Queue
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from deconfound import InterventionObjective, LossTerm, Modality
from errors import InternalError, NumericError, ValidationError
from numerics import (
    Adam,
    ParameterStore,
    Tensor,
    add,
    binary_cross_entropy_with_logits,
    concat,
    cross_entropy,
    cross_entropy_soft,
    gelu,
    matmul,
    no_grad,
    scale,
    take,
    transpose,
)
from two_stream import (
    MASK_ID,
    Linear,
    MaskState,
    ModelConfig,
    RegionSequence,
    StreamOutput,
    TokenSequence,
    TwoStreamBert,
)

BASE_OBJECTIVES = ("mlm", "mom", "align")


# =============================================================================
# Política de enmascarado
# =============================================================================

@dataclass
class MaskingPolicy:
    lang_mask_rate: float = 0.15
    lang_to_mask: float = 0.8
    lang_keep: float = 0.1
    lang_random: float = 0.1
    vis_mask_rate: float = 0.15
    vis_keep_original_rate: float = 0.10
    noun_only: bool = False

    def validate(self) -> List[str]:
        errors = []
        for name in ("lang_mask_rate", "lang_to_mask", "lang_keep", "lang_random",
                     "vis_mask_rate", "vis_keep_original_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                errors.append(f"masking.{name}={value} outside [0, 1]")
        split = self.lang_to_mask + self.lang_keep + self.lang_random
        if abs(split - 1.0) > 1e-9:
            errors.append(f"masking language split sums to {split}, expected 1")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MaskingPolicy":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown masking keys: {unknown}")
        return cls(**data)


def _random_word(rng: np.random.Generator, vocab_size: int) -> int:
    # ids >= 2: nunca [CLS] ni [MASK]
    return int(rng.integers(MASK_ID + 1, vocab_size))


def apply_masking(
    tokens: TokenSequence,
    regions: RegionSequence,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    vocab_size: int,
) -> Tuple[TokenSequence, RegionSequence]:
    """
    Enmascara cada modalidad de forma independiente. [CLS] y la región
    global nunca se enmascaran. Los ids originales se conservan en `ids`.
    """
    if tokens.masked_positions() or regions.masked_positions():
        raise ValidationError("apply_masking expects an unmasked pair")

    candidates = set(tokens.noun_positions()) if policy.noun_only else set(range(1, len(tokens)))
    states = [MaskState.UNMASKED] * len(tokens)
    replacements: Dict[int, int] = {}
    for pos in range(1, len(tokens)):
        if pos not in candidates or rng.random() >= policy.lang_mask_rate:
            continue
        split = rng.random()
        if split < policy.lang_to_mask:
            states[pos] = MaskState.MASKED_TO_MASK
        elif split < policy.lang_to_mask + policy.lang_keep:
            states[pos] = MaskState.MASKED_KEPT
        else:
            states[pos] = MaskState.MASKED_RANDOM
            replacements[pos] = _random_word(rng, vocab_size)
    masked_tokens = TokenSequence(ids=list(tokens.ids), mask_states=states,
                                  replacement_ids=replacements, is_noun=list(tokens.is_noun))

    region_states = [MaskState.UNMASKED] * len(regions)
    for pos in range(1, len(regions)):
        if rng.random() >= policy.vis_mask_rate:
            continue
        if rng.random() < policy.vis_keep_original_rate:
            region_states[pos] = MaskState.MASKED_KEPT_ORIGINAL
        else:
            region_states[pos] = MaskState.MASKED_TO_MASK
    masked_regions = RegionSequence(regions.features.copy(), regions.boxes.copy(),
                                    regions.soft_labels.copy(), region_states)
    return masked_tokens, masked_regions


# =============================================================================
# Lotes
# =============================================================================

@dataclass
class PairExample:
    tokens: TokenSequence
    regions: RegionSequence
    aligned: bool = True


@dataclass
class Batch:
    examples: List[PairExample]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def num_aligned(self) -> int:
        return sum(1 for e in self.examples if e.aligned)


def build_batch(
    pairs: Sequence[Tuple[TokenSequence, RegionSequence]],
    indices: Sequence[int],
    policy: MaskingPolicy,
    rng: np.random.Generator,
    vocab_size: int,
    negative_rate: float = 0.5,
) -> Batch:
    """
    Para cada índice, con probabilidad negative_rate la oración se sustituye
    por la de otro par (la imagen se conserva) y el par queda como no alineado.
    """
    examples = []
    for i in indices:
        tokens, regions = pairs[i]
        aligned = True
        if len(pairs) > 1 and rng.random() < negative_rate:
            other = int(rng.integers(0, len(pairs) - 1))
            other = other + 1 if other >= i else other
            tokens = pairs[other][0]
            aligned = False
        masked_tokens, masked_regions = apply_masking(tokens, regions, policy, rng, vocab_size)
        examples.append(PairExample(masked_tokens, masked_regions, aligned))
    return Batch(examples)


class BatchSampler:
    """Muestrea lotes de un corpus en memoria con su propio flujo RNG."""

    def __init__(self, pairs: Sequence[Tuple[TokenSequence, RegionSequence]], policy: MaskingPolicy,
                 batch_size: int, vocab_size: int, seed: int, negative_rate: float = 0.5):
        if not pairs:
            raise ValidationError("cannot sample batches from an empty corpus")
        if batch_size <= 0:
            raise ValidationError("batch_size must be positive")
        self.pairs = list(pairs)
        self.policy = policy
        self.batch_size = batch_size
        self.vocab_size = vocab_size
        self.negative_rate = negative_rate
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))

    def next_batch(self) -> Batch:
        replace = self.batch_size > len(self.pairs)
        indices = self.rng.choice(len(self.pairs), size=self.batch_size, replace=replace)
        return build_batch(self.pairs, [int(i) for i in indices], self.policy, self.rng,
                           self.vocab_size, self.negative_rate)


class BatchPrefetcher:
    """
    Hilo productor que llena una cola acotada con lotes del sampler.
    Un solo productor en orden: la secuencia de lotes es idéntica a la secuencial.
    """

    def __init__(self, sampler: BatchSampler, num_batches: int, depth: int = 4):
        self.sampler = sampler
        self.num_batches = num_batches
        self._queue: Queue = Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._worker, daemon=True)
        self._started = False

    def _worker(self) -> None:
        try:
            for _ in range(self.num_batches):
                if self._stop.is_set():
                    return
                self._queue.put(self.sampler.next_batch())
        except Exception as e:  # se propaga al consumidor
            self._queue.put(e)

    def start(self) -> "BatchPrefetcher":
        if not self._started:
            self._thread.start()
            self._started = True
        return self

    def get(self) -> Batch:
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    @property
    def alive(self) -> bool:
        return self._thread.is_alive()

    def close(self, timeout: float = 5.0) -> None:
        """Detiene el productor; vaciar la cola libera un put bloqueado."""
        self._stop.set()
        while not self._queue.empty():
            self._queue.get_nowait()
        if self._started:
            self._thread.join(timeout)

    def __iter__(self):
        self.start()
        for _ in range(self.num_batches):
            yield self.get()


# =============================================================================
# Cabezas y pérdidas
# =============================================================================

class AlignmentHead:
    """FFN sobre [w_CLS, o_G] -> logit de alineación."""

    def __init__(self, store: ParameterStore, name: str, d_lang: int, d_vis: int, hidden: int,
                 rng: np.random.Generator, std: float):
        self.inner = Linear(store, f"{name}.in", d_lang + d_vis, hidden, rng, std)
        self.outer = Linear(store, f"{name}.out", hidden, 1, rng, std)

    def __call__(self, lang_cls: Tensor, vis_global: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(concat([lang_cls, vis_global], axis=1))))


class PretrainingHeads:
    """Bias del MLM (la matriz es la tabla de palabras), clasificador MOM y cabeza de alineación."""

    def __init__(self, store: ParameterStore, config: ModelConfig, rng: np.random.Generator):
        std = config.init_std
        self.mlm_bias = store.create("heads.mlm.bias", np.zeros(config.vocab_size))
        self.mom_classifier = Linear(store, "heads.mom", config.d_vis, config.num_object_classes, rng, std)
        self.alignment = AlignmentHead(store, "heads.align", config.d_lang, config.d_vis,
                                       config.d_lang, rng, std)


def mlm_loss(
    output: StreamOutput,
    seq: TokenSequence,
    word_table: Tensor,
    bias: Optional[Tensor] = None,
    exclude_positions: Sequence[int] = (),
) -> LossTerm:
    """Entropía cruzada de lang_final . word_table^T (+ bias) en posiciones enmascaradas."""
    excluded = set(exclude_positions)
    positions = [p for p in seq.masked_positions() if p not in excluded]
    if not positions:
        return LossTerm.empty()
    logits = matmul(take(output.lang_final, positions, axis=0), transpose(word_table))
    if bias is not None:
        logits = add(logits, bias)
    return LossTerm(cross_entropy(logits, [seq.original_id(p) for p in positions]), len(positions))


def mom_loss(
    output: StreamOutput,
    seq: RegionSequence,
    classifier: Linear,
    exclude_positions: Sequence[int] = (),
) -> LossTerm:
    """Entropía cruzada suave en regiones enmascaradas (incluye masked_kept_original)."""
    excluded = set(exclude_positions)
    positions = [p for p in seq.masked_positions() if p not in excluded]
    if not positions:
        return LossTerm.empty()
    logits = classifier(take(output.vis_final, positions, axis=0))
    return LossTerm(cross_entropy_soft(logits, seq.soft_labels[positions]), len(positions))


def alignment_loss(output: StreamOutput, aligned: bool, align_head: AlignmentHead) -> LossTerm:
    logit = align_head(output.lang_cls, output.vis_global)
    return LossTerm(binary_cross_entropy_with_logits(logit, 1.0 if aligned else 0.0), 1)


# =============================================================================
# Paso de entrenamiento
# =============================================================================

@dataclass
class LossReport:
    step: int
    losses: Dict[str, float]
    total: float
    counts: Dict[str, int] = field(default_factory=dict)
    encoder_passes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        """Forma plana del stream de métricas: {step, <objetivos>, total}."""
        out: Dict[str, Any] = {"step": self.step}
        out.update(self.losses)
        out["total"] = self.total
        return out


def _finite_or_raise(name: str, value: Tensor, step: int) -> None:
    if not np.isfinite(value.data).all():
        raise NumericError(
            f"non-finite {name} loss at step {step}",
            {"step": step, "objective": name, "value": float(np.asarray(value.data).reshape(-1)[0])},
        )


def training_step(
    batch: Batch,
    model: TwoStreamBert,
    heads: PretrainingHeads,
    weights: Dict[str, float],
    optimizer: Adam,
    objectives: Sequence[InterventionObjective] = (),
    mtm_aligned_only: bool = True,
    step: int = 0,
) -> LossReport:
    """
    total = sum_i w_i * loss_i sobre los objetivos habilitados.

    `weights` habilita mlm/mom/align por clave; cada objetivo de intervención
    usa weights[objective.name] (por defecto 1.0). Cada pérdida es la media
    sobre los pares del lote que aportan elementos.
    """
    enabled = [name for name in BASE_OBJECTIVES if name in weights]
    enabled += [obj.name for obj in objectives]
    if len(set(enabled)) != len(enabled):
        raise ValidationError(f"duplicate objective names: {enabled}")
    if not len(batch):
        raise ValidationError("empty batch")

    terms: Dict[str, List[Tensor]] = {name: [] for name in enabled}
    counts: Dict[str, int] = {name: 0 for name in enabled}
    passes_before = model.encoder_passes
    needs_clean = any(obj.needs_clean_pass for obj in objectives)
    track_clean = any(obj.needs_clean_pass and not obj.stop_gradient for obj in objectives)

    for example in batch.examples:
        output = model(example.tokens, example.regions)
        mtm_active = example.aligned or not mtm_aligned_only

        excluded_lang: Set[int] = set()
        excluded_vis: Set[int] = set()
        if mtm_active and objectives:
            clean = None
            if needs_clean:
                if track_clean:
                    clean = model(example.tokens.clean(), example.regions.clean())
                else:
                    with no_grad():
                        clean = model(example.tokens.clean(), example.regions.clean())
            for obj in objectives:
                term, replaced = obj.compute(output, clean, example.tokens, example.regions)
                for ref in replaced:
                    (excluded_lang if ref.modality is Modality.LANGUAGE else excluded_vis).add(ref.position)
                if not term.is_empty:
                    terms[obj.name].append(term.value)
                    counts[obj.name] += term.count

        if mtm_active and "mlm" in terms:
            term = mlm_loss(output, example.tokens, model.word_table, heads.mlm_bias, excluded_lang)
            if not term.is_empty:
                terms["mlm"].append(term.value)
                counts["mlm"] += term.count
        if mtm_active and "mom" in terms:
            term = mom_loss(output, example.regions, heads.mom_classifier, excluded_vis)
            if not term.is_empty:
                terms["mom"].append(term.value)
                counts["mom"] += term.count
        if "align" in terms:
            term = alignment_loss(output, example.aligned, heads.alignment)
            terms["align"].append(term.value)
            counts["align"] += 1

    total: Optional[Tensor] = None
    losses: Dict[str, float] = {}
    for name in enabled:
        if not terms[name]:
            losses[name] = 0.0
            continue
        value = terms[name][0]
        for extra in terms[name][1:]:
            value = add(value, extra)
        value = scale(value, 1.0 / len(terms[name]))
        _finite_or_raise(name, value, step)
        losses[name] = value.item()
        weighted = scale(value, float(weights.get(name, 1.0)))
        total = weighted if total is None else add(total, weighted)

    # todos los pesos en 0: ni backward ni paso, así los momentos de Adam no mueven nada
    weighted_any = any(float(weights.get(name, 1.0)) != 0.0 for name in enabled if terms[name])
    optimizer.zero_grad()
    if total is not None and weighted_any:
        total.backward()
        norm = optimizer.grad_norm()
        if not np.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {step}", {"step": step, "grad_norm": norm})
        optimizer.step()
    passes = model.encoder_passes - passes_before
    if passes < len(batch):
        raise InternalError("every example needs at least one encoder pass")
    return LossReport(
        step=step,
        losses=losses,
        total=total.item() if total is not None else 0.0,
        counts=counts,
        encoder_passes=passes,
    )


def default_weights(enabled: Sequence[str] = BASE_OBJECTIVES) -> Dict[str, float]:
    return {name: 1.0 for name in enabled}
