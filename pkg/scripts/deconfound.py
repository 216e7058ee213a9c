#!/usr/bin/env python3
"""
DeVLBert Deconfound v1.0
Intervención por ajuste backdoor sobre el Bert de dos flujos.

Componentes:
- Diccionarios de confusores (visión: media de features por clase; lenguaje:
  media de embeddings contextuales por sustantivo; conjunto: union de ambos)
- Pesos de importancia alpha con exclusión de la clase del token predicho
- Cabeza de intervención P(Y|do(X)) = softmax(W_c [x, sum_z P(z) alpha(z) z])
- Selección de (x, y) o r para los diseños A, B, C y D
- Pérdida de intervención y objetivo completo por (diseño, alcance)

Uso:
  from deconfound import build_vision_dictionary, InterventionHead, InterventionObjective
"""

import json
import threading
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InternalError, ValidationError
from numerics import (
    ParameterStore,
    Tensor,
    concat,
    cross_entropy_soft,
    div,
    matmul,
    mul,
    softmax,
    sum_,
    take,
    transpose,
)
from two_stream import Linear, RegionSequence, StreamOutput, TokenSequence

SCHEMA_PATH = Path(__file__).parent.parent / "schemas" / "confounder_dictionary.schema.json"
EPS_DEN = 1e-8


class Modality(str, Enum):
    VISION = "vision"
    LANGUAGE = "language"
    JOINT = "joint"


class Design(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"

    @property
    def needs_clean_pass(self) -> bool:
        return self in (Design.A, Design.C)

    @property
    def replaces_mtm(self) -> bool:
        return self in (Design.A, Design.B)


class ScopeMode(str, Enum):
    VISION_INTRA = "vision_intra"
    LANGUAGE_INTRA = "language_intra"
    INTER_MODAL = "inter_modal"


ClassKey = Tuple[str, int]


# =============================================================================
# Diccionarios de confusores
# =============================================================================

@dataclass
class ConfounderEntry:
    class_id: int
    feature: np.ndarray
    prior: float
    modality: Modality


@dataclass
class ConfounderDictionary:
    """Conjunto {z} de una modalidad: features (m x d_z), priors P(z), class ids."""
    modality: Modality
    class_ids: List[int]
    features: np.ndarray
    priors: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self.class_ids = [int(c) for c in self.class_ids]
        self.features = np.asarray(self.features, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        errors = self.validate()
        if errors:
            raise ValidationError(errors)

    def validate(self) -> List[str]:
        errors = []
        if self.modality is Modality.JOINT:
            errors.append("single-modality dictionary cannot be 'joint' (use JointDictionary)")
        m = len(self.class_ids)
        if m == 0:
            errors.append("dictionary has no entries")
            return errors
        if self.features.ndim != 2 or self.features.shape[0] != m:
            errors.append(f"features must be {m} x d_z, got {self.features.shape}")
        if self.priors.shape != (m,):
            errors.append(f"priors must have {m} values")
        else:
            if (self.priors < 0).any():
                errors.append("priors must be nonnegative")
            if abs(self.priors.sum() - 1.0) > 1e-9:
                errors.append(f"priors sum to {self.priors.sum():.12f}, expected 1")
        if len(set(self.class_ids)) != m:
            errors.append("class_ids must be unique")
        return errors

    @property
    def size(self) -> int:
        return len(self.class_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def entry_modalities(self) -> List[Modality]:
        return [self.modality] * self.size

    @property
    def class_keys(self) -> List[ClassKey]:
        return [(self.modality.value, c) for c in self.class_ids]

    @property
    def entries(self) -> List[ConfounderEntry]:
        return [
            ConfounderEntry(c, self.features[i], float(self.priors[i]), self.modality)
            for i, c in enumerate(self.class_ids)
        ]

    def index_of(self, key: ClassKey) -> Optional[int]:
        try:
            return self.class_keys.index(tuple(key))
        except ValueError:
            return None

    def to_json(self) -> Dict:
        return {
            "modality": self.modality.value,
            "entries": [
                {"class_id": c, "prior": float(self.priors[i]), "feature": self.features[i].tolist()}
                for i, c in enumerate(self.class_ids)
            ],
        }


@dataclass
class JointDictionary:
    """
    Union de los diccionarios de lenguaje y visión para intervención
    inter-modal. Las features se proyectan a un d_z común dentro de la cabeza;
    los priors se re-normalizan para sumar 1.
    """
    language: ConfounderDictionary
    vision: ConfounderDictionary
    priors: np.ndarray = None
    frozen: bool = True

    modality = Modality.JOINT

    def __post_init__(self):
        if self.priors is None:
            self.priors = np.concatenate([self.language.priors, self.vision.priors])
            self.priors = self.priors / self.priors.sum()
        self.priors = np.asarray(self.priors, dtype=np.float64)
        errors = []
        if self.language.modality is not Modality.LANGUAGE or self.vision.modality is not Modality.VISION:
            errors.append("joint dictionary needs one language and one vision part")
        if self.priors.shape != (self.size,):
            errors.append(f"joint priors must have {self.size} values")
        elif abs(self.priors.sum() - 1.0) > 1e-9 or (self.priors < 0).any():
            errors.append("joint priors must be a distribution")
        if errors:
            raise ValidationError(errors)

    @property
    def size(self) -> int:
        return self.language.size + self.vision.size

    @property
    def entry_modalities(self) -> List[Modality]:
        return self.language.entry_modalities + self.vision.entry_modalities

    @property
    def class_keys(self) -> List[ClassKey]:
        return self.language.class_keys + self.vision.class_keys

    @property
    def entries(self) -> List[ConfounderEntry]:
        out = []
        for i, entry in enumerate(self.language.entries + self.vision.entries):
            out.append(ConfounderEntry(entry.class_id, entry.feature, float(self.priors[i]), entry.modality))
        return out

    def index_of(self, key: ClassKey) -> Optional[int]:
        try:
            return self.class_keys.index(tuple(key))
        except ValueError:
            return None

    def to_json(self) -> Dict:
        return {
            "modality": Modality.JOINT.value,
            "entries": [
                {"class_id": e.class_id, "prior": e.prior, "feature": e.feature.tolist(), "modality": e.modality.value}
                for e in self.entries
            ],
        }


AnyDictionary = Union[ConfounderDictionary, JointDictionary]


def build_joint_dictionary(language: ConfounderDictionary, vision: ConfounderDictionary) -> JointDictionary:
    return JointDictionary(language=language, vision=vision)


def _load_schema() -> Optional[Dict]:
    if not SCHEMA_PATH.exists():
        return None
    with open(SCHEMA_PATH, 'r', encoding='utf-8') as f:
        return json.load(f)


def dictionary_from_json(data: Dict) -> AnyDictionary:
    """Reconstruye un diccionario y re-valida el invariante de priors."""
    import jsonschema

    schema = _load_schema()
    if schema is not None:
        try:
            jsonschema.validate(instance=data, schema=schema)
        except jsonschema.ValidationError as e:
            raise ValidationError(f"dictionary schema: {e.message}") from None

    modality = Modality(data["modality"])
    entries = data["entries"]
    if modality is not Modality.JOINT:
        return ConfounderDictionary(
            modality=modality,
            class_ids=[e["class_id"] for e in entries],
            features=np.array([e["feature"] for e in entries], dtype=np.float64),
            priors=np.array([e["prior"] for e in entries], dtype=np.float64),
        )

    parts = {}
    for part in (Modality.LANGUAGE, Modality.VISION):
        chosen = [e for e in entries if e.get("modality") == part.value]
        if not chosen:
            raise ValidationError(f"joint dictionary has no {part.value} entries")
        priors = np.array([e["prior"] for e in chosen], dtype=np.float64)
        parts[part] = ConfounderDictionary(
            modality=part,
            class_ids=[e["class_id"] for e in chosen],
            features=np.array([e["feature"] for e in chosen], dtype=np.float64),
            priors=priors / priors.sum(),
        )
    ordered = [e for e in entries if e.get("modality") == "language"] + \
              [e for e in entries if e.get("modality") == "vision"]
    return JointDictionary(
        language=parts[Modality.LANGUAGE],
        vision=parts[Modality.VISION],
        priors=np.array([e["prior"] for e in ordered], dtype=np.float64),
    )


def save_dictionary(dictionary: AnyDictionary, path: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'w', encoding='utf-8') as f:
        json.dump(dictionary.to_json(), f)
    return target


def load_dictionary(path: str) -> AnyDictionary:
    with open(path, 'r', encoding='utf-8') as f:
        return dictionary_from_json(json.load(f))


def build_vision_dictionary(
    region_sequences: Iterable[RegionSequence],
    encoder: Optional[Callable[[RegionSequence], np.ndarray]] = None,
    min_count: int = 2,
) -> ConfounderDictionary:
    """
    Una entrada por clase observada >= min_count veces (clase = argmax de la
    etiqueta suave). Feature = media de las features de la clase; prior =
    conteo de la clase / total de regiones.

    `encoder` devuelve una fila por región (N_v+1 x d); sin encoder se usan las
    features crudas.
    """
    sums: Dict[int, np.ndarray] = {}
    counts: Dict[int, int] = defaultdict(int)
    total = 0
    for seq in region_sequences:
        rows = encoder(seq) if encoder is not None else seq.features
        for position, class_id in enumerate(seq.class_ids()):
            if position == 0:
                continue
            class_id = int(class_id)
            sums[class_id] = sums.get(class_id, 0.0) + rows[position]
            counts[class_id] += 1
            total += 1
    if total == 0:
        raise ValidationError("cannot build a vision dictionary from an empty corpus")

    kept = sorted(c for c in counts if counts[c] >= min_count)
    if not kept:
        raise ValidationError(f"no object class reaches min_count={min_count}")
    return ConfounderDictionary(
        modality=Modality.VISION,
        class_ids=kept,
        features=np.array([sums[c] / counts[c] for c in kept]),
        priors=_priors([counts[c] for c in kept], total, renormalize=len(kept) != len(counts)),
    )


def build_language_dictionary(
    pairs: Iterable[Tuple[TokenSequence, RegionSequence]],
    embedder: Callable[[TokenSequence, RegionSequence], np.ndarray],
    min_count: int = 2,
) -> ConfounderDictionary:
    """
    Una entrada por sustantivo con >= min_count apariciones. Feature = media de
    su embedding contextual (una pasada congelada del modelo actual); prior =
    apariciones / total de apariciones de sustantivos retenidos.
    """
    sums: Dict[int, np.ndarray] = {}
    counts: Dict[int, int] = defaultdict(int)
    for tokens, regions in pairs:
        nouns = tokens.noun_positions()
        if not nouns:
            continue
        rows = embedder(tokens, regions)
        for position in nouns:
            word = tokens.ids[position]
            sums[word] = sums.get(word, 0.0) + rows[position]
            counts[word] += 1

    kept = sorted(w for w in counts if counts[w] >= min_count)
    if not kept:
        raise ValidationError(f"no noun reaches min_count={min_count}")
    retained = sum(counts[w] for w in kept)
    return ConfounderDictionary(
        modality=Modality.LANGUAGE,
        class_ids=kept,
        features=np.array([sums[w] / counts[w] for w in kept]),
        priors=_priors([counts[w] for w in kept], retained, renormalize=False),
    )


def _priors(counts: Sequence[int], total: int, renormalize: bool) -> np.ndarray:
    priors = np.array(counts, dtype=np.float64) / total
    # clases descartadas por min_count dejan masa fuera; el diccionario debe sumar 1
    return priors / priors.sum() if renormalize else priors


class DictionaryRegistry:
    """Diccionarios vigentes por nombre; el refresco los sustituye de forma atómica."""

    def __init__(self):
        self._lock = threading.Lock()
        self._current: Dict[str, AnyDictionary] = {}
        self.version = 0

    def publish(self, dictionaries: Dict[str, AnyDictionary]) -> None:
        with self._lock:
            merged = dict(self._current)
            merged.update(dictionaries)
            self._current = merged
            self.version += 1

    def get(self, name: str) -> AnyDictionary:
        with self._lock:
            current = self._current
        if name not in current:
            raise ValidationError(f"dictionary '{name}' has not been built")
        return current[name]

    def names(self) -> List[str]:
        with self._lock:
            return sorted(self._current)


# =============================================================================
# Pesos alpha y cabeza de intervención
# =============================================================================

def normalize_importance(
    scores: Tensor,
    excluded: Optional[int] = None,
    mode: str = "ratio",
    eps_den: float = EPS_DEN,
) -> Tensor:
    """
    scores: 1 x m productos (W_y y)^T (W_z z).

    ratio   -> alpha(z) = s(z) / sum_{v != excluded} s(v)  (puede ser negativo)
    softmax -> softmax sobre las entradas no excluidas

    La entrada excluida recibe exactamente 0. Si |denominador| < eps_den el
    modo ratio cae a pesos uniformes sobre las entradas restantes.
    """
    m = scores.shape[1]
    keep = [i for i in range(m) if i != excluded]
    if not keep:
        raise ValidationError("exclusion removed every confounder entry")
    sub = take(scores, keep, axis=1) if excluded is not None else scores

    if mode == "softmax":
        weights = softmax(sub, axis=1)
    elif mode == "ratio":
        denominator = float(sub.data.sum())
        if abs(denominator) < eps_den:
            weights = Tensor(np.full((1, len(keep)), 1.0 / len(keep)))
        else:
            weights = div(sub, sum_(sub, axis=1, keepdims=True))
    else:
        raise ValidationError(f"unknown alpha mode '{mode}'")

    if excluded is None:
        return weights
    padded = concat([weights, Tensor(np.zeros((1, 1)))], axis=1)
    order = [len(keep) if i == excluded else keep.index(i) for i in range(m)]
    return take(padded, order, axis=1)


class InterventionHead:
    """
    Parámetros W_y (o W_r en el diseño D), W_z, W_c y, para el alcance
    inter-modal, proyecciones de cada parte del diccionario a un d_z común.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        design: Design,
        d_x: int,
        d_z: int,
        target_size: int,
        rng: np.random.Generator,
        d_bilinear: int = 32,
        std: float = 0.02,
        exclusion_enabled: bool = True,
        alpha_mode: str = "ratio",
        eps_den: float = EPS_DEN,
        feature_dims: Optional[Dict[Modality, int]] = None,
    ):
        self.name = name
        self.design = Design(design)
        self.d_x = d_x
        self.d_z = d_z
        self.target_size = target_size
        self.exclusion_enabled = exclusion_enabled
        self.alpha_mode = alpha_mode
        self.eps_den = eps_den
        self.invocations = 0

        query_name = "W_r" if self.design is Design.D else "W_y"
        self.query_projection = Linear(store, f"{name}.{query_name}", d_x, d_bilinear, rng, std, bias=False)
        self.key_projection = Linear(store, f"{name}.W_z", d_z, d_bilinear, rng, std, bias=False)
        classifier_in = d_z if self.design is Design.D else d_x + d_z
        self.classifier = Linear(store, f"{name}.W_c", classifier_in, target_size, rng, std)

        self.feature_projections: Dict[Modality, Linear] = {}
        for modality, dim in (feature_dims or {}).items():
            self.feature_projections[modality] = Linear(
                store, f"{name}.project.{modality.value}", dim, d_z, rng, std, bias=False)

    @property
    def target_space(self) -> int:
        return self.target_size

    def confounder_features(self, dictionary: AnyDictionary) -> Tensor:
        """Matriz m x d_z de features de confusores."""
        if isinstance(dictionary, JointDictionary):
            if set(self.feature_projections) != {Modality.LANGUAGE, Modality.VISION}:
                raise ValidationError(f"{self.name}: joint dictionary needs language and vision projections")
            return concat([
                self.feature_projections[Modality.LANGUAGE](Tensor(dictionary.language.features)),
                self.feature_projections[Modality.VISION](Tensor(dictionary.vision.features)),
            ], axis=0)
        features = Tensor(dictionary.features)
        if dictionary.modality in self.feature_projections:
            return self.feature_projections[dictionary.modality](features)
        if dictionary.feature_dim != self.d_z:
            raise ValidationError(f"{self.name}: dictionary feature dim {dictionary.feature_dim} != d_z {self.d_z}")
        return features

    def alpha_weights(self, y_or_r: Tensor, dictionary: AnyDictionary,
                      exclude_class: Optional[ClassKey] = None) -> Tensor:
        """alpha_y(z) (o alpha_r(z) en D, sin exclusión)."""
        return self._alpha(y_or_r, self.confounder_features(dictionary), dictionary, exclude_class)

    def _alpha(self, y_or_r: Tensor, z: Tensor, dictionary: AnyDictionary,
               exclude_class: Optional[ClassKey]) -> Tensor:
        if y_or_r.shape != (1, self.d_x):
            raise ValidationError(f"{self.name}: query shape {y_or_r.shape} != (1, {self.d_x})")
        excluded = None
        if exclude_class is not None and self.exclusion_enabled and self.design is not Design.D:
            excluded = dictionary.index_of(exclude_class)
        scores = matmul(self.query_projection(y_or_r), transpose(self.key_projection(z)))
        return normalize_importance(scores, excluded, self.alpha_mode, self.eps_den)

    def logits(self, x: Optional[Tensor], y_or_r: Tensor, dictionary: AnyDictionary,
               exclude_class: Optional[ClassKey] = None) -> Tensor:
        """
        pooled = sum_z P(z) alpha(z) z ; logits = W_c [x, pooled] (A/B/C) o W_c pooled (D).
        """
        if (x is None) != (self.design is Design.D):
            raise ValidationError(f"{self.name}: x must be given iff design is A, B or C")
        if x is not None and x.shape != (1, self.d_x):
            raise ValidationError(f"{self.name}: x shape {x.shape} != (1, {self.d_x})")
        self.invocations += 1
        z = self.confounder_features(dictionary)
        alpha = self._alpha(y_or_r, z, dictionary, exclude_class)
        weights = mul(alpha, Tensor(dictionary.priors.reshape(1, -1)))
        pooled = matmul(weights, z)
        features = pooled if x is None else concat([x, pooled], axis=1)
        return self.classifier(features)


def intervention_logits(x: Optional[Tensor], y_or_r: Tensor, dictionary: AnyDictionary,
                        head: InterventionHead, exclude_class: Optional[ClassKey] = None) -> Tensor:
    return head.logits(x, y_or_r, dictionary, exclude_class)


# =============================================================================
# Selección de X / Y según el diseño
# =============================================================================

class TokenRef(NamedTuple):
    modality: Modality
    position: int


@dataclass
class XYSample:
    x: Tensor
    y: Tensor
    x_ref: TokenRef
    y_ref: TokenRef


@dataclass
class RSample:
    r: Tensor
    ref: TokenRef


def representation(output: StreamOutput, ref: TokenRef) -> Tensor:
    source = output.lang_final if ref.modality is Modality.LANGUAGE else output.vis_final
    return take(source, [ref.position], axis=0)


def _check_same_shapes(masked_pass: StreamOutput, clean_pass: StreamOutput) -> None:
    if masked_pass.lang_final.shape != clean_pass.lang_final.shape or \
            masked_pass.vis_final.shape != clean_pass.vis_final.shape:
        raise InternalError("clean pass does not match the masked pass positions")


def _target_side(clean_pass: StreamOutput, ref: TokenRef, stop_gradient: bool) -> Tensor:
    y = representation(clean_pass, ref)
    return y.detach() if stop_gradient else y


def select_xy_design_A(masked_pass: StreamOutput, clean_pass: StreamOutput,
                       masked_refs: Sequence[TokenRef], stop_gradient: bool = True) -> List[XYSample]:
    """x = representación final enmascarada en t; y = misma posición en la pasada limpia."""
    _check_same_shapes(masked_pass, clean_pass)
    return [
        XYSample(x=representation(masked_pass, ref), y=_target_side(clean_pass, ref, stop_gradient),
                 x_ref=ref, y_ref=ref)
        for ref in masked_refs
    ]


def _pair_allowed(scope: Optional["InterventionScope"], x_ref: TokenRef, y_ref: TokenRef) -> bool:
    return scope is None or scope.pair_allowed(x_ref, y_ref)


def select_xy_design_B(masked_pass: StreamOutput, masked_refs: Sequence[TokenRef],
                       unmasked_refs: Sequence[TokenRef],
                       scope: Optional["InterventionScope"] = None) -> List[XYSample]:
    """Producto cartesiano: y_t enmascarado x cada x_k sin máscara (una sola pasada)."""
    samples = []
    for y_ref in masked_refs:
        y = representation(masked_pass, y_ref)
        for x_ref in unmasked_refs:
            if _pair_allowed(scope, x_ref, y_ref):
                samples.append(XYSample(x=representation(masked_pass, x_ref), y=y, x_ref=x_ref, y_ref=y_ref))
    return samples


def select_xy_design_C(masked_pass: StreamOutput, clean_pass: StreamOutput,
                       masked_refs: Sequence[TokenRef], unmasked_refs: Sequence[TokenRef],
                       scope: Optional["InterventionScope"] = None,
                       stop_gradient: bool = True) -> List[XYSample]:
    """y de la pasada limpia en cada t enmascarado; x sobre todos los k sin máscara."""
    _check_same_shapes(masked_pass, clean_pass)
    samples = []
    for y_ref in masked_refs:
        y = _target_side(clean_pass, y_ref, stop_gradient)
        for x_ref in unmasked_refs:
            if _pair_allowed(scope, x_ref, y_ref):
                samples.append(XYSample(x=representation(masked_pass, x_ref), y=y, x_ref=x_ref, y_ref=y_ref))
    return samples


def select_r_design_D(masked_pass: StreamOutput, unmasked_refs: Sequence[TokenRef]) -> List[RSample]:
    """Un r por token sin máscara; el objetivo es la propia etiqueta del token."""
    return [RSample(r=representation(masked_pass, ref), ref=ref) for ref in unmasked_refs]


# =============================================================================
# Alcance, objetivos y pérdida
# =============================================================================

@dataclass
class InterventionScope:
    """
    Que tokens participan como X e Y y contra que diccionario.

    vision_intra   -> X e Y regiones
    language_intra -> X e Y sustantivos
    inter_modal    -> X e Y de modalidades distintas, diccionario conjunto
    En todos los casos el lado de lenguaje se restringe a sustantivos.
    """
    mode: ScopeMode
    dictionary_name: str
    vocab_size: int
    num_object_classes: int

    @property
    def modalities(self) -> Tuple[Modality, ...]:
        if self.mode is ScopeMode.VISION_INTRA:
            return (Modality.VISION,)
        if self.mode is ScopeMode.LANGUAGE_INTRA:
            return (Modality.LANGUAGE,)
        return (Modality.LANGUAGE, Modality.VISION)

    @property
    def target_size(self) -> int:
        if self.mode is ScopeMode.VISION_INTRA:
            return self.num_object_classes
        if self.mode is ScopeMode.LANGUAGE_INTRA:
            return self.vocab_size
        return self.vocab_size + self.num_object_classes

    def pair_allowed(self, x_ref: TokenRef, y_ref: TokenRef) -> bool:
        if self.mode is ScopeMode.INTER_MODAL:
            return x_ref.modality is not y_ref.modality
        return x_ref.modality is y_ref.modality is self.modalities[0]

    def refs(self, tokens: TokenSequence, regions: RegionSequence) -> Tuple[List[TokenRef], List[TokenRef]]:
        """(enmascarados, sin máscara) dentro del alcance, sin [CLS] ni región global."""
        masked, unmasked = [], []
        if Modality.LANGUAGE in self.modalities:
            for p in tokens.noun_positions():
                ref = TokenRef(Modality.LANGUAGE, p)
                (masked if tokens.mask_states[p].is_masked else unmasked).append(ref)
        if Modality.VISION in self.modalities:
            for p in range(1, len(regions)):
                ref = TokenRef(Modality.VISION, p)
                (masked if regions.mask_states[p].is_masked else unmasked).append(ref)
        return masked, unmasked

    def target(self, ref: TokenRef, tokens: TokenSequence, regions: RegionSequence) -> Tuple[np.ndarray, ClassKey]:
        """(distribución objetivo en el espacio del alcance, clase para la exclusión)."""
        target = np.zeros(self.target_size)
        if ref.modality is Modality.LANGUAGE:
            word = tokens.original_id(ref.position)
            if not 0 <= word < self.vocab_size:
                raise ValidationError(f"target word id {word} outside vocabulary")
            target[word] = 1.0
            return target, (Modality.LANGUAGE.value, word)
        soft = regions.soft_labels[ref.position]
        if soft.shape != (self.num_object_classes,):
            raise ValidationError(f"soft label size {soft.shape[0]} != {self.num_object_classes} classes")
        offset = self.vocab_size if self.mode is ScopeMode.INTER_MODAL else 0
        target[offset:offset + self.num_object_classes] = soft
        return target, (Modality.VISION.value, int(soft.argmax()))


@dataclass
class LossTerm:
    """Pérdida escalar y número de elementos que la componen (0 = vacía)."""
    value: Tensor
    count: int

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    @classmethod
    def empty(cls) -> "LossTerm":
        return cls(Tensor(0.0), 0)


def intervention_loss(
    samples: Sequence[Union[XYSample, RSample]],
    dictionary: AnyDictionary,
    head: InterventionHead,
    targets: Sequence[Tuple[np.ndarray, ClassKey]],
    scope: InterventionScope,
) -> LossTerm:
    """Media de la entropía cruzada de intervention_logits sobre las muestras."""
    if not samples:
        return LossTerm.empty()
    if len(targets) != len(samples):
        raise InternalError("one target per selected sample is required")
    rows = []
    for sample, (target, class_key) in zip(samples, targets):
        if target.shape != (head.target_size,):
            raise ValidationError(f"target size {target.shape} != head target space {head.target_size}")
        if isinstance(sample, RSample):
            rows.append(head.logits(None, sample.r, dictionary))
        else:
            rows.append(head.logits(sample.x, sample.y, dictionary, exclude_class=class_key))
    logits = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    return LossTerm(cross_entropy_soft(logits, np.stack([t for t, _ in targets])), len(samples))


@dataclass
class InterventionObjective:
    """Un par (diseño, alcance) con su cabeza y el diccionario vigente."""
    design: Design
    scope: InterventionScope
    head: InterventionHead
    registry: DictionaryRegistry
    stop_gradient: bool = True

    @property
    def name(self) -> str:
        return f"intervention_{self.design.value}_{self.scope.mode.value}"

    @property
    def needs_clean_pass(self) -> bool:
        return self.design.needs_clean_pass

    def compute(
        self,
        masked_pass: StreamOutput,
        clean_pass: Optional[StreamOutput],
        tokens: TokenSequence,
        regions: RegionSequence,
    ) -> Tuple[LossTerm, List[TokenRef]]:
        """
        Devuelve (pérdida, referencias cuyo MTM queda reemplazado).
        A y B reemplazan el MTM en las posiciones intervenidas; C y D no.
        """
        masked_refs, unmasked_refs = self.scope.refs(tokens, regions)
        if self.needs_clean_pass and clean_pass is None:
            raise InternalError(f"{self.name} requires a clean pass")

        if self.design is Design.A:
            samples = select_xy_design_A(masked_pass, clean_pass, masked_refs, self.stop_gradient)
        elif self.design is Design.B:
            samples = select_xy_design_B(masked_pass, masked_refs, unmasked_refs, self.scope)
        elif self.design is Design.C:
            samples = select_xy_design_C(masked_pass, clean_pass, masked_refs, unmasked_refs,
                                         self.scope, self.stop_gradient)
        else:
            samples = select_r_design_D(masked_pass, unmasked_refs)

        targets = [
            self.scope.target(s.ref if isinstance(s, RSample) else s.y_ref, tokens, regions)
            for s in samples
        ]
        dictionary = self.registry.get(self.scope.dictionary_name)
        loss = intervention_loss(samples, dictionary, self.head, targets, self.scope)
        replaced = list(masked_refs) if self.design.replaces_mtm else []
        return loss, replaced


def build_objective(
    store: ParameterStore,
    design: Design,
    scope_mode: ScopeMode,
    registry: DictionaryRegistry,
    d_lang: int,
    d_vis: int,
    vocab_size: int,
    num_object_classes: int,
    rng: np.random.Generator,
    d_bilinear: int = 32,
    std: float = 0.02,
    exclusion_enabled: bool = True,
    alpha_mode: str = "ratio",
    eps_den: float = EPS_DEN,
    stop_gradient: bool = True,
) -> InterventionObjective:
    """Crea cabeza y alcance para (diseño, alcance) con dimensiones del diccionario registrado."""
    design, scope_mode = Design(design), ScopeMode(scope_mode)
    dictionary_name = {
        ScopeMode.VISION_INTRA: "vision",
        ScopeMode.LANGUAGE_INTRA: "language",
        ScopeMode.INTER_MODAL: "joint",
    }[scope_mode]
    scope = InterventionScope(scope_mode, dictionary_name, vocab_size, num_object_classes)
    dictionary = registry.get(dictionary_name)

    feature_dims = None
    if scope_mode is ScopeMode.VISION_INTRA:
        d_x, d_z = d_vis, dictionary.feature_dim
    elif scope_mode is ScopeMode.LANGUAGE_INTRA:
        d_x, d_z = d_lang, dictionary.feature_dim
    else:
        if d_lang != d_vis:
            raise ValidationError("inter_modal scope requires d_lang == d_vis")
        d_x = d_z = d_lang
        feature_dims = {
            Modality.LANGUAGE: dictionary.language.feature_dim,
            Modality.VISION: dictionary.vision.feature_dim,
        }

    head = InterventionHead(
        store, f"intervention.{design.value}.{scope_mode.value}", design, d_x, d_z, scope.target_size, rng,
        d_bilinear=d_bilinear, std=std, exclusion_enabled=exclusion_enabled, alpha_mode=alpha_mode,
        eps_den=eps_den, feature_dims=feature_dims,
    )
    return InterventionObjective(design, scope, head, registry, stop_gradient)
