#!/usr/bin/env python3
"""
DeVLBert Two-Stream Backbone v1.0
Bert de dos flujos: embeddings de palabras y regiones, capas específicas de
modalidad y capas de co-atención entre lenguaje y visión.

Disposición del stack:
  L capas solo-lenguaje
  B bloques de (co-atención, capa de lenguaje, capa visual)

Uso:
  from two_stream import ModelConfig, TwoStreamBert
  model = TwoStreamBert(ModelConfig(vocab_size=64, num_object_classes=8, feature_dim=16))
  out = model.forward(tokens, regions)
"""

import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ValidationError
from numerics import (
    ParameterStore,
    Tensor,
    add,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    relu_or_gelu,
    scale,
    softmax,
    take,
    transpose,
    truncated_normal,
)

# Ids especiales del vocabulario
CLS_ID = 0
MASK_ID = 1
UNK_ID = 2
SPECIAL_TOKENS = ["[CLS]", "[MASK]", "[UNK]"]

GLOBAL_BOX = (0.0, 0.0, 1.0, 1.0, 1.0)


class MaskState(str, Enum):
    UNMASKED = "unmasked"
    MASKED_TO_MASK = "masked_to_MASK"
    MASKED_KEPT = "masked_kept"
    MASKED_RANDOM = "masked_random"
    MASKED_KEPT_ORIGINAL = "masked_kept_original"

    @property
    def is_masked(self) -> bool:
        return self is not MaskState.UNMASKED


# =============================================================================
# Secuencias de entrada
# =============================================================================

@dataclass
class TokenSequence:
    """
    Oración tokenizada. `ids` guarda siempre los ids originales; la entrada
    efectiva al modelo sale de input_ids() según mask_states.
    """
    ids: List[int]
    mask_states: List[MaskState] = field(default_factory=list)
    replacement_ids: Dict[int, int] = field(default_factory=dict)
    is_noun: List[bool] = field(default_factory=list)

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        if not self.mask_states:
            self.mask_states = [MaskState.UNMASKED] * len(self.ids)
        if not self.is_noun:
            self.is_noun = [False] * len(self.ids)
        errors = []
        if not self.ids or self.ids[0] != CLS_ID:
            errors.append("position 0 must be [CLS]")
        if len(self.mask_states) != len(self.ids) or len(self.is_noun) != len(self.ids):
            errors.append("mask_states/is_noun length differs from ids")
        elif self.mask_states[0].is_masked:
            errors.append("[CLS] can never be masked")
        for pos, state in enumerate(self.mask_states):
            if state is MaskState.MASKED_RANDOM and pos not in self.replacement_ids:
                errors.append(f"position {pos} is masked_random without replacement id")
        if errors:
            raise ValidationError(errors)

    def __len__(self) -> int:
        return len(self.ids)

    def input_ids(self) -> List[int]:
        out = []
        for pos, (token, state) in enumerate(zip(self.ids, self.mask_states)):
            if state is MaskState.MASKED_TO_MASK:
                out.append(MASK_ID)
            elif state is MaskState.MASKED_RANDOM:
                out.append(self.replacement_ids[pos])
            else:
                out.append(token)
        return out

    def original_id(self, position: int) -> int:
        return self.ids[position]

    def masked_positions(self) -> List[int]:
        return [p for p, s in enumerate(self.mask_states) if s.is_masked]

    def unmasked_positions(self) -> List[int]:
        """Posiciones sin máscara excluyendo [CLS]."""
        return [p for p, s in enumerate(self.mask_states) if p > 0 and not s.is_masked]

    def noun_positions(self) -> List[int]:
        return [p for p, noun in enumerate(self.is_noun) if noun and p > 0]

    def clean(self) -> "TokenSequence":
        return TokenSequence(ids=list(self.ids), is_noun=list(self.is_noun))


@dataclass
class RegionSequence:
    """
    Regiones de una imagen. La fila 0 es la región global o_[G]
    (media de las regiones 1..N_v, caja de imagen completa).
    """
    features: np.ndarray
    boxes: np.ndarray
    soft_labels: np.ndarray
    mask_states: List[MaskState] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
        if not self.mask_states:
            self.mask_states = [MaskState.UNMASKED] * len(self.features)
        errors = self.validate()
        if errors:
            raise ValidationError(errors)

    @classmethod
    def from_regions(cls, features: np.ndarray, boxes: np.ndarray, soft_labels: np.ndarray) -> "RegionSequence":
        """Antepone la región global a N_v regiones."""
        features = np.asarray(features, dtype=np.float64)
        soft_labels = np.asarray(soft_labels, dtype=np.float64)
        if len(features) == 0:
            raise ValidationError("a region sequence needs at least one region")
        return cls(
            features=np.vstack([features.mean(axis=0, keepdims=True), features]),
            boxes=np.vstack([np.array([GLOBAL_BOX]), np.asarray(boxes, dtype=np.float64)]),
            soft_labels=np.vstack([soft_labels.mean(axis=0, keepdims=True), soft_labels]),
        )

    def validate(self) -> List[str]:
        errors = []
        n = len(self.features)
        if self.features.ndim != 2 or n < 2:
            errors.append(f"features must be (N_v+1) x D with N_v >= 1, got {self.features.shape}")
            return errors
        if self.boxes.shape != (n, 5):
            errors.append(f"boxes must be {n} x 5, got {self.boxes.shape}")
        elif (self.boxes < 0).any() or (self.boxes > 1).any():
            errors.append("boxes must be normalized to [0, 1]")
        if self.soft_labels.ndim != 2 or len(self.soft_labels) != n:
            errors.append(f"soft_labels must have {n} rows")
        elif (np.abs(self.soft_labels.sum(axis=1) - 1.0) > 1e-6).any():
            errors.append("every soft_labels row must sum to 1")
        if len(self.mask_states) != n:
            errors.append("mask_states length differs from regions")
        elif self.mask_states[0].is_masked:
            errors.append("the global region can never be masked")
        return errors

    def __len__(self) -> int:
        return len(self.features)

    @property
    def num_regions(self) -> int:
        return len(self.features) - 1

    def class_ids(self) -> np.ndarray:
        return self.soft_labels.argmax(axis=1)

    def masked_positions(self) -> List[int]:
        return [p for p, s in enumerate(self.mask_states) if s.is_masked]

    def unmasked_positions(self) -> List[int]:
        """Regiones sin máscara excluyendo la global."""
        return [p for p, s in enumerate(self.mask_states) if p > 0 and not s.is_masked]

    def permuted(self, order: Sequence[int]) -> "RegionSequence":
        """Reordena las regiones 1..N_v (order es una permutación de 1..N_v)."""
        index = [0] + list(order)
        return RegionSequence(
            features=self.features[index],
            boxes=self.boxes[index],
            soft_labels=self.soft_labels[index],
            mask_states=[self.mask_states[i] for i in index],
        )

    def clean(self) -> "RegionSequence":
        return RegionSequence(self.features.copy(), self.boxes.copy(), self.soft_labels.copy())


# =============================================================================
# Configuración y salida
# =============================================================================

@dataclass
class ModelConfig:
    """Hiperparametros del backbone (valores de escritorio por defecto)."""
    vocab_size: int
    num_object_classes: int
    feature_dim: int
    d_lang: int = 64
    d_vis: int = 64
    num_lang_layers: int = 2
    num_coattn_blocks: int = 2
    num_heads: int = 4
    ffn_width: int = 256
    max_lang_len: int = 32
    max_regions: int = 16
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02
    activation: str = "gelu"
    seed: int = 0

    def validate(self) -> List[str]:
        errors = []
        for name in ("vocab_size", "num_object_classes", "feature_dim", "d_lang", "d_vis",
                     "num_heads", "ffn_width", "max_lang_len", "max_regions"):
            if getattr(self, name) <= 0:
                errors.append(f"model.{name} must be positive")
        if self.num_lang_layers < 0 or self.num_coattn_blocks < 0:
            errors.append("layer counts must be >= 0")
        if self.num_heads > 0:
            if self.d_lang % self.num_heads:
                errors.append(f"d_lang={self.d_lang} not divisible by num_heads={self.num_heads}")
            if self.d_vis % self.num_heads:
                errors.append(f"d_vis={self.d_vis} not divisible by num_heads={self.num_heads}")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            errors.append("vocab_size must exceed the special tokens")
        if self.activation not in ("gelu", "relu"):
            errors.append(f"unknown activation '{self.activation}'")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown model config keys: {unknown}")
        return cls(**data)


@dataclass
class StreamOutput:
    lang_final: Tensor
    vis_final: Tensor

    @property
    def lang_cls(self) -> Tensor:
        return take(self.lang_final, [0], axis=0)

    @property
    def vis_global(self) -> Tensor:
        return take(self.vis_final, [0], axis=0)


# =============================================================================
# Capas
# =============================================================================

class Linear:
    """y = x W + b, con W de forma (d_in, d_out)."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, std: float = 0.02, bias: bool = True):
        self.weight = store.create(f"{name}.weight", truncated_normal(rng, (d_in, d_out), std))
        self.bias = store.create(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int, eps: float):
        self.gain = store.create(f"{name}.gain", np.ones(d))
        self.bias = store.create(f"{name}.bias", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, d: int, width: int,
                 rng: np.random.Generator, std: float, activation: str = "gelu"):
        self.inner = Linear(store, f"{name}.in", d, width, rng, std)
        self.outer = Linear(store, f"{name}.out", width, d, rng, std)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu_or_gelu(self.inner(x), self.activation))


class MultiHeadAttention:
    """
    Atención multi-cabeza con consultas de un flujo y claves/valores de otro
    (o del mismo). Escala sqrt(d_query / heads); con una cabeza es sqrt(D).
    """

    def __init__(self, store: ParameterStore, name: str, d_query: int, d_kv: int,
                 num_heads: int, rng: np.random.Generator, std: float):
        self.query = Linear(store, f"{name}.query", d_query, d_query, rng, std)
        self.key = Linear(store, f"{name}.key", d_kv, d_query, rng, std)
        self.value = Linear(store, f"{name}.value", d_kv, d_query, rng, std)
        self.output = Linear(store, f"{name}.output", d_query, d_query, rng, std)
        self.num_heads = num_heads
        self.head_dim = d_query // num_heads
        self.last_probs: List[np.ndarray] = []

    def __call__(self, queries: Tensor, keys_values: Tensor, keep_probs: bool = False) -> Tensor:
        q = self.query(queries)
        k = self.key(keys_values)
        v = self.value(keys_values)
        inv_scale = 1.0 / math.sqrt(self.head_dim)
        heads = []
        probs_seen = []
        for h in range(self.num_heads):
            cols = range(h * self.head_dim, (h + 1) * self.head_dim)
            q_h = take(q, cols, axis=1)
            k_h = take(k, cols, axis=1)
            v_h = take(v, cols, axis=1)
            probs = softmax(scale(matmul(q_h, transpose(k_h)), inv_scale), axis=-1)
            if keep_probs:
                probs_seen.append(probs.numpy())
            heads.append(matmul(probs, v_h))
        self.last_probs = probs_seen
        merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return self.output(merged)


class TransformerLayer:
    """atención -> add&norm -> feed-forward -> add&norm."""

    def __init__(self, store: ParameterStore, name: str, d: int, config: ModelConfig, rng: np.random.Generator):
        std = config.init_std
        self.attention = MultiHeadAttention(store, f"{name}.attention", d, d, config.num_heads, rng, std)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d, config.layer_norm_eps)
        self.ffn = FeedForward(store, f"{name}.ffn", d, config.ffn_width, rng, std, config.activation)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d, config.layer_norm_eps)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(add(x, self.attention(x, x)))
        return self.norm2(add(h, self.ffn(h)))


class CoAttentionLayer:
    """
    Co-atención en ambas direcciones sobre las mismas entradas:
    lenguaje consulta a visión y visión consulta a lenguaje en paralelo.
    """

    def __init__(self, store: ParameterStore, name: str, config: ModelConfig, rng: np.random.Generator):
        std, eps = config.init_std, config.layer_norm_eps
        dl, dv = config.d_lang, config.d_vis
        self.lang_attention = MultiHeadAttention(store, f"{name}.lang", dl, dv, config.num_heads, rng, std)
        self.vis_attention = MultiHeadAttention(store, f"{name}.vis", dv, dl, config.num_heads, rng, std)
        self.lang_norm1 = LayerNorm(store, f"{name}.lang_norm1", dl, eps)
        self.vis_norm1 = LayerNorm(store, f"{name}.vis_norm1", dv, eps)
        self.lang_ffn = FeedForward(store, f"{name}.lang_ffn", dl, config.ffn_width, rng, std, config.activation)
        self.vis_ffn = FeedForward(store, f"{name}.vis_ffn", dv, config.ffn_width, rng, std, config.activation)
        self.lang_norm2 = LayerNorm(store, f"{name}.lang_norm2", dl, eps)
        self.vis_norm2 = LayerNorm(store, f"{name}.vis_norm2", dv, eps)

    def __call__(self, lang: Tensor, vis: Tensor) -> Tuple[Tensor, Tensor]:
        lang_att = self.lang_attention(lang, vis)
        vis_att = self.vis_attention(vis, lang)
        lang_h = self.lang_norm1(add(lang, lang_att))
        vis_h = self.vis_norm1(add(vis, vis_att))
        lang_out = self.lang_norm2(add(lang_h, self.lang_ffn(lang_h)))
        vis_out = self.vis_norm2(add(vis_h, self.vis_ffn(vis_h)))
        return lang_out, vis_out


class CoAttentionBlock:
    def __init__(self, store: ParameterStore, index: int, config: ModelConfig, rng: np.random.Generator):
        self.coattention = CoAttentionLayer(store, f"coattn.{index}", config, rng)
        self.lang_layer = TransformerLayer(store, f"block.{index}.lang", config.d_lang, config, rng)
        self.vis_layer = TransformerLayer(store, f"block.{index}.vis", config.d_vis, config, rng)

    def __call__(self, lang: Tensor, vis: Tensor) -> Tuple[Tensor, Tensor]:
        lang, vis = self.coattention(lang, vis)
        return self.lang_layer(lang), self.vis_layer(vis)


# =============================================================================
# Embeddings y modelo
# =============================================================================

def embed_language(seq: TokenSequence, position_table: Tensor, word_table: Tensor) -> Tensor:
    """w_t^0 = w_t^e + p_t, con el id efectivo según el estado de máscara."""
    if len(seq) > position_table.shape[0]:
        raise ValidationError(f"sentence length {len(seq)} exceeds max_lang_len {position_table.shape[0]}")
    words = embedding_lookup(word_table, seq.input_ids())
    positions = take(position_table, range(len(seq)), axis=0)
    return add(words, positions)


class TwoStreamBert:
    """Backbone completo. Todos los parámetros viven en un ParameterStore."""

    def __init__(self, config: ModelConfig, store: Optional[ParameterStore] = None,
                 rng: Optional[np.random.Generator] = None):
        errors = config.validate()
        if errors:
            raise ValidationError(errors)
        self.config = config
        self.params = store if store is not None else ParameterStore()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        std = config.init_std

        self.word_table = self.params.create(
            "lang.embed.word", truncated_normal(rng, (config.vocab_size, config.d_lang), std))
        self.position_table = self.params.create(
            "lang.embed.position", truncated_normal(rng, (config.max_lang_len, config.d_lang), std))
        self.region_projection = Linear(self.params, "vis.embed.feature", config.feature_dim, config.d_vis, rng, std)
        self.box_inner = Linear(self.params, "vis.embed.box.in", 5, config.d_vis, rng, std)
        self.box_outer = Linear(self.params, "vis.embed.box.out", config.d_vis, config.d_vis, rng, std)
        self.mask_embedding = self.params.create("vis.embed.mask", truncated_normal(rng, (1, config.d_vis), std))

        self.lang_layers = [
            TransformerLayer(self.params, f"lang.layer.{i}", config.d_lang, config, rng)
            for i in range(config.num_lang_layers)
        ]
        self.blocks = [CoAttentionBlock(self.params, i, config, rng) for i in range(config.num_coattn_blocks)]
        self.encoder_passes = 0

    def parameters(self):
        return self.params.parameters()

    def encode_boxes(self, boxes: np.ndarray) -> Tensor:
        return self.box_outer(gelu(self.box_inner(Tensor(boxes))))

    def embed_language(self, seq: TokenSequence) -> Tensor:
        bad = [i for i in seq.input_ids() if not 0 <= i < self.config.vocab_size]
        if bad:
            raise ValidationError(f"token ids out of vocabulary: {bad[:5]}")
        return embed_language(seq, self.position_table, self.word_table)

    def embed_regions(self, seq: RegionSequence) -> Tensor:
        """
        Proyección de la región + FFN(caja 5-d). Las regiones enmascaradas
        usan el embedding de máscara salvo masked_kept_original.
        """
        if seq.features.shape[1] != self.config.feature_dim:
            raise ValidationError(
                f"region feature dim {seq.features.shape[1]} != model feature_dim {self.config.feature_dim}")
        if seq.num_regions > self.config.max_regions:
            raise ValidationError(f"{seq.num_regions} regions exceed max_regions {self.config.max_regions}")
        if (seq.boxes < 0).any() or (seq.boxes > 1).any():
            raise ValidationError("boxes must be normalized to [0, 1]")

        projected = self.region_projection(Tensor(seq.features))
        n = len(seq)
        replaced = [
            s.is_masked and s is not MaskState.MASKED_KEPT_ORIGINAL for s in seq.mask_states
        ]
        if any(replaced):
            rows = [n if r else i for i, r in enumerate(replaced)]
            projected = take(concat([projected, self.mask_embedding], axis=0), rows, axis=0)
        return add(projected, self.encode_boxes(seq.boxes))

    def forward(self, lang_seq: TokenSequence, vis_seq: RegionSequence) -> StreamOutput:
        self.encoder_passes += 1
        lang = self.embed_language(lang_seq)
        vis = self.embed_regions(vis_seq)
        for layer in self.lang_layers:
            lang = layer(lang)
        for block in self.blocks:
            lang, vis = block(lang, vis)
        return StreamOutput(lang_final=lang, vis_final=vis)

    __call__ = forward
