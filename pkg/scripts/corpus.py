#!/usr/bin/env python3
"""
DeVLBert Corpus v1.0
Generador de corpus sintético con confusores plantados, tokenización y carga.

Grafo del generador:
  z ~ P(z)
  x ~ P(x|z)        sustantivo de la oración (camino Z -> X)
  y ~ P(y|z)        clase de una región (camino Z -> Y, sin arista X -> Y)
  g ~ U(genuinos)   con probabilidad `rate`, independiente de z
  region(edge[g])   con probabilidad edge.prob (arista directa X -> Y)

Archivos de salida (cada JSONL empieza con una línea {"header": {...}}):
  corpus.jsonl    visible para el modelo
  stats.jsonl     proyección {"x", "y", "z"} para causal_stats
  latents.jsonl   sidecar con los z verdaderos (solo oráculos)
  manifest.json   conteos y SHA-256 de los tres archivos

Uso:
  from corpus import load_generator_spec, generate, load_corpus
  spec = load_generator_spec("config/planted_spec.json")
  generate(spec, 256, "data/planted")
"""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import CorpusFormatError, ValidationError
from two_stream import CLS_ID, SPECIAL_TOKENS, UNK_ID, RegionSequence, TokenSequence

SCHEMAS_DIR = Path(__file__).parent.parent / "schemas"
CORPUS_FILE = "corpus.jsonl"
STATS_FILE = "stats.jsonl"
LATENTS_FILE = "latents.jsonl"
MANIFEST_FILE = "manifest.json"
FORMAT_VERSION = 1
PROB_TOLERANCE = 1e-9


def _load_schema(name: str) -> Dict:
    with open(SCHEMAS_DIR / name, 'r', encoding='utf-8') as f:
        return json.load(f)


# =============================================================================
# Vocabulario y tokenización
# =============================================================================

class Vocabulary:
    """ids 0..2 reservados para [CLS], [MASK], [UNK]; luego las palabras en orden."""

    def __init__(self, words: Sequence[str], nouns: Sequence[str] = ()):
        self.tokens: List[str] = list(SPECIAL_TOKENS)
        self._index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for word in words:
            word = word.lower()
            if word in self._index:
                raise ValidationError(f"duplicate vocabulary word '{word}'")
            self._index[word] = len(self.tokens)
            self.tokens.append(word)
        self.nouns = {n.lower() for n in nouns}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._index

    def id_of(self, word: str) -> int:
        return self._index.get(word.lower(), UNK_ID)

    def word_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def is_noun(self, word: str) -> bool:
        return word.lower() in self.nouns

    def to_json(self) -> Dict[str, Any]:
        return {"words": self.tokens[len(SPECIAL_TOKENS):], "nouns": sorted(self.nouns)}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "Vocabulary":
        return cls(data["words"], data.get("nouns", ()))


def tokenize(sentence_text: str, vocab: Vocabulary) -> TokenSequence:
    """Separa por espacios, pasa a minusculas, mapea a ids (desconocidas -> [UNK]) y antepone [CLS]."""
    words = sentence_text.lower().split()
    return TokenSequence(
        ids=[CLS_ID] + [vocab.id_of(w) for w in words],
        is_noun=[False] + [vocab.is_noun(w) for w in words],
    )


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    return " ".join(vocab.word_of(i) for i in seq.ids[1:])


# =============================================================================
# Especificación del generador
# =============================================================================

@dataclass
class ConfounderSpec:
    name: str
    prior: float
    p_word: Dict[str, float]
    p_class: Dict[str, float]


@dataclass
class GenuineEdge:
    word: str
    object_class: str
    prob: float


@dataclass
class GeneratorSpec:
    nouns: List[str]
    fillers: List[str]
    object_classes: List[str]
    confounders: List[ConfounderSpec]
    genuine_edges: List[GenuineEdge] = field(default_factory=list)
    genuine_rate: float = 0.0
    planted_pairs: List[Tuple[str, str]] = field(default_factory=list)
    fillers_min: int = 0
    fillers_max: int = 0
    background_min: int = 0
    background_max: int = 0
    background_classes: List[str] = field(default_factory=list)
    feature_dim: int = 16
    noise_sigma: float = 0.3
    temperature: float = 4.0
    mean_scale: float = 1.0
    seed: int = 0

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.nouns + self.fillers, self.nouns)

    def validate(self) -> List[str]:
        """Errores de normalización y referencias, nombrando la tabla culpable."""
        errors = []
        nouns, classes = set(self.nouns), set(self.object_classes)
        if not self.confounders:
            errors.append("confounders: at least one confounder is required")
        priors = [c.prior for c in self.confounders]
        if any(p < 0 for p in priors) or abs(sum(priors) - 1.0) > PROB_TOLERANCE:
            errors.append(f"confounders.prior: priors must be nonnegative and sum to 1 (got {sum(priors):.12g})")
        names = [c.name for c in self.confounders]
        if len(set(names)) != len(names):
            errors.append("confounders: duplicate confounder names")
        for conf in self.confounders:
            for table, support, values in (("p_word", nouns, conf.p_word), ("p_class", classes, conf.p_class)):
                where = f"confounders[{conf.name}].{table}"
                unknown = sorted(set(values) - support)
                if unknown:
                    errors.append(f"{where}: unknown symbols {unknown}")
                if any(v < 0 for v in values.values()) or abs(sum(values.values()) - 1.0) > PROB_TOLERANCE:
                    errors.append(f"{where}: probabilities must be nonnegative and sum to 1 "
                                  f"(got {sum(values.values()):.12g})")
        for edge in self.genuine_edges:
            if edge.word not in nouns or edge.object_class not in classes:
                errors.append(f"genuine_edges[{edge.word}]: unknown word or class")
            if not 0.0 <= edge.prob <= 1.0:
                errors.append(f"genuine_edges[{edge.word}].prob outside [0, 1]")
        if not 0.0 <= self.genuine_rate <= 1.0:
            errors.append("genuine.rate outside [0, 1]")
        if self.genuine_rate > 0 and not self.genuine_edges:
            errors.append("genuine.rate > 0 requires genuine edges")
        for x, y in self.planted_pairs:
            if x not in nouns or y not in classes:
                errors.append(f"planted_pairs: unknown pair ({x}, {y})")
        if set(self.background_classes) - classes:
            errors.append("regions.background_classes: unknown classes")
        if self.background_max > 0 and not self.background_classes:
            errors.append("regions.background_classes required when background_max > 0")
        if not 0 <= self.fillers_min <= self.fillers_max:
            errors.append("sentence: fillers_min must be <= fillers_max")
        if self.fillers_max > 0 and not self.fillers:
            errors.append("vocabulary.fillers required when fillers_max > 0")
        if not 0 <= self.background_min <= self.background_max:
            errors.append("regions: background_min must be <= background_max")
        if self.feature_dim <= 0 or self.noise_sigma < 0 or self.temperature <= 0:
            errors.append("features: dim and temperature must be positive, noise_sigma nonnegative")
        overlap = nouns & set(self.fillers)
        if overlap:
            errors.append(f"vocabulary: words both noun and filler {sorted(overlap)}")
        return errors

    def to_json(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "vocabulary": {"nouns": self.nouns, "fillers": self.fillers},
            "object_classes": self.object_classes,
            "confounders": [
                {"name": c.name, "prior": c.prior, "p_word": c.p_word, "p_class": c.p_class}
                for c in self.confounders
            ],
            "genuine": {
                "rate": self.genuine_rate,
                "edges": [{"word": e.word, "class": e.object_class, "prob": e.prob} for e in self.genuine_edges],
            },
            "planted_pairs": [{"x": x, "y": y} for x, y in self.planted_pairs],
            "sentence": {"fillers_min": self.fillers_min, "fillers_max": self.fillers_max},
            "regions": {"background_min": self.background_min, "background_max": self.background_max,
                        "background_classes": self.background_classes},
            "features": {"dim": self.feature_dim, "noise_sigma": self.noise_sigma,
                         "temperature": self.temperature, "mean_scale": self.mean_scale},
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "GeneratorSpec":
        import jsonschema

        try:
            jsonschema.validate(instance=data, schema=_load_schema("generator_spec.schema.json"))
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ValidationError(f"generator spec {where}: {e.message}") from None

        genuine = data.get("genuine", {})
        sentence = data.get("sentence", {})
        regions = data.get("regions", {})
        features = data.get("features", {})
        spec = cls(
            nouns=list(data["vocabulary"]["nouns"]),
            fillers=list(data["vocabulary"].get("fillers", [])),
            object_classes=list(data["object_classes"]),
            confounders=[
                ConfounderSpec(c["name"], float(c["prior"]), dict(c["p_word"]), dict(c["p_class"]))
                for c in data["confounders"]
            ],
            genuine_edges=[GenuineEdge(e["word"], e["class"], float(e["prob"])) for e in genuine.get("edges", [])],
            genuine_rate=float(genuine.get("rate", 0.0)),
            planted_pairs=[(p["x"], p["y"]) for p in data.get("planted_pairs", [])],
            fillers_min=int(sentence.get("fillers_min", 0)),
            fillers_max=int(sentence.get("fillers_max", 0)),
            background_min=int(regions.get("background_min", 0)),
            background_max=int(regions.get("background_max", 0)),
            background_classes=list(regions.get("background_classes", [])),
            feature_dim=int(features.get("dim", 16)),
            noise_sigma=float(features.get("noise_sigma", 0.3)),
            temperature=float(features.get("temperature", 4.0)),
            mean_scale=float(features.get("mean_scale", 1.0)),
            seed=int(data.get("seed", 0)),
        )
        errors = spec.validate()
        if errors:
            raise ValidationError(errors)
        return spec


def load_generator_spec(path: str) -> GeneratorSpec:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"generator spec not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None
    return GeneratorSpec.from_json(data)


# =============================================================================
# Registros
# =============================================================================

@dataclass
class PairRecord:
    """
    Un par oración/imagen. `latents` solo se rellena en la salida del
    generador y viaja por el sidecar; nunca llega al modelo.
    """
    sentence: List[str]
    nouns: List[int]
    features: np.ndarray
    boxes: np.ndarray
    soft_labels: np.ndarray
    latents: Optional[List[int]] = None
    object_classes: Optional[List[str]] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            "sentence": self.sentence,
            "nouns": self.nouns,
            "regions": [
                {"feat": f.tolist(), "box": b.tolist(), "soft_label": s.tolist()}
                for f, b, s in zip(self.features, self.boxes, self.soft_labels)
            ],
        }

    def noun_words(self) -> List[str]:
        return [self.sentence[i] for i in self.nouns]

    def to_sequences(self, vocab: Vocabulary) -> Tuple[TokenSequence, RegionSequence]:
        noun_set = set(self.nouns)
        tokens = TokenSequence(
            ids=[CLS_ID] + [vocab.id_of(w) for w in self.sentence],
            is_noun=[False] + [i in noun_set for i in range(len(self.sentence))],
        )
        return tokens, RegionSequence.from_regions(self.features, self.boxes, self.soft_labels)


def class_means(spec: GeneratorSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    return rng.normal(0.0, spec.mean_scale, size=(len(spec.object_classes), spec.feature_dim))


def soft_labels_for(features: np.ndarray, means: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(-||f - mu_c||^2 / T) por fila."""
    dist = ((features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    logits = -dist / temperature
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


def _random_box(rng: np.random.Generator) -> List[float]:
    x1, x2 = np.sort(rng.random(2))
    y1, y2 = np.sort(rng.random(2))
    return [float(x1), float(y1), float(x2), float(y2), float((x2 - x1) * (y2 - y1))]


def _choice(rng: np.random.Generator, table: Dict[str, float]) -> str:
    keys = list(table)
    probs = np.array([table[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=probs / probs.sum()))]


def sample_record(spec: GeneratorSpec, index: int, means: np.ndarray) -> Tuple[PairRecord, List[str]]:
    """
    Muestrea el registro `index` con su propio flujo RNG derivado de la semilla.
    Devuelve (registro, clases verdaderas de las regiones).
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, index)))
    priors = np.array([c.prior for c in spec.confounders])
    z = int(rng.choice(len(priors), p=priors / priors.sum()))
    confounder = spec.confounders[z]

    nouns = [_choice(rng, confounder.p_word)]
    classes = [_choice(rng, confounder.p_class)]
    if spec.genuine_edges and rng.random() < spec.genuine_rate:
        edge = spec.genuine_edges[int(rng.integers(len(spec.genuine_edges)))]
        nouns.append(edge.word)
        if rng.random() < edge.prob:
            classes.append(edge.object_class)
    for _ in range(int(rng.integers(spec.background_min, spec.background_max + 1))):
        classes.append(spec.background_classes[int(rng.integers(len(spec.background_classes)))])
    fillers = [spec.fillers[int(rng.integers(len(spec.fillers)))]
               for _ in range(int(rng.integers(spec.fillers_min, spec.fillers_max + 1)))]

    words = nouns + fillers
    order = rng.permutation(len(words))
    sentence = [words[i] for i in order]
    noun_positions = sorted(int(np.where(order == i)[0][0]) for i in range(len(nouns)))

    classes = [classes[i] for i in rng.permutation(len(classes))]
    class_index = [spec.object_classes.index(c) for c in classes]
    features = means[class_index] + spec.noise_sigma * rng.standard_normal((len(classes), spec.feature_dim))
    boxes = np.array([_random_box(rng) for _ in classes])
    record = PairRecord(
        sentence=sentence,
        nouns=noun_positions,
        features=features,
        boxes=boxes,
        soft_labels=soft_labels_for(features, means, spec.temperature),
        latents=[z],
        object_classes=classes,
    )
    return record, classes


def generate_records(spec: GeneratorSpec, n: int, workers: int = 1) -> List[PairRecord]:
    """n registros en orden de índice; el resultado no depende de `workers`."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    means = class_means(spec)
    if workers <= 1 or n < 2:
        return [sample_record(spec, i, means)[0] for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [r for r, _ in pool.map(lambda i: sample_record(spec, i, means), range(n))]


def _header(kind: str, spec: GeneratorSpec, n: int) -> Dict[str, Any]:
    header = {"kind": kind, "version": FORMAT_VERSION, "count": n, "seed": spec.seed}
    if kind == "corpus":
        header.update({
            "vocabulary": spec.vocabulary.to_json(),
            "object_classes": spec.object_classes,
            "feature_dim": spec.feature_dim,
            "planted_pairs": [{"x": x, "y": y} for x, y in spec.planted_pairs],
            "genuine_pairs": [{"x": e.word, "y": e.object_class} for e in spec.genuine_edges],
        })
    if kind == "latents":
        header["confounders"] = [c.name for c in spec.confounders]
    return header


def _write_jsonl(path: Path, header: Dict[str, Any], rows: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    lines = [json.dumps({"header": header}, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in rows)
    data = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return {"name": path.name, "records": len(rows), "sha256": hashlib.sha256(data).hexdigest()}


def generate(spec: GeneratorSpec, n: int, out_dir: str, workers: int = 1) -> Dict[str, Any]:
    """
    Escribe corpus, stats, latents y manifest en out_dir. Misma spec y n
    producen archivos idénticos byte a byte.
    """
    errors = spec.validate()
    if errors:
        raise ValidationError(errors)
    records = generate_records(spec, n, workers)
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)

    files = [
        _write_jsonl(target / CORPUS_FILE, _header("corpus", spec, n), [r.to_json() for r in records]),
        _write_jsonl(target / STATS_FILE, _header("stats", spec, n), [
            {"x": sorted(set(r.noun_words())), "y": sorted(set(r.object_classes)),
             "z": [spec.confounders[r.latents[0]].name]}
            for r in records
        ]),
        _write_jsonl(target / LATENTS_FILE, _header("latents", spec, n), [{"latents": r.latents} for r in records]),
    ]
    manifest = {"count": n, "seed": spec.seed, "files": files}
    with open(target / MANIFEST_FILE, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


# =============================================================================
# Carga
# =============================================================================

@dataclass
class Corpus:
    header: Dict[str, Any]
    vocabulary: Vocabulary
    object_classes: List[str]
    records: List[PairRecord]

    def __len__(self) -> int:
        return len(self.records)

    def sequences(self) -> List[Tuple[TokenSequence, RegionSequence]]:
        return [r.to_sequences(self.vocabulary) for r in self.records]

    @property
    def planted_pairs(self) -> List[Tuple[str, str]]:
        """Pares espurios plantados por el generador (vacío en corpus externos)."""
        return [(p["x"], p["y"]) for p in self.header.get("planted_pairs", [])]


def _record_errors(row: Dict[str, Any], feature_dim: int, num_classes: int) -> List[str]:
    errors = []
    sentence = row["sentence"]
    if any(not 0 <= i < len(sentence) for i in row["nouns"]):
        errors.append("noun index outside the sentence")
    if not row["regions"]:
        errors.append("at least one region is required")
    for k, region in enumerate(row["regions"]):
        if len(region["feat"]) != feature_dim:
            errors.append(f"region {k}: feature dim {len(region['feat'])} != {feature_dim}")
        if any(not 0.0 <= v <= 1.0 for v in region["box"]):
            errors.append(f"region {k}: box not normalized to [0, 1]")
        soft = region["soft_label"]
        if len(soft) != num_classes:
            errors.append(f"region {k}: soft label size {len(soft)} != {num_classes}")
        elif any(v < 0 for v in soft) or abs(sum(soft) - 1.0) > 1e-6:
            errors.append(f"region {k}: soft label does not sum to 1")
    return errors


def iter_corpus(path: str) -> Iterator[Tuple[int, PairRecord, Dict[str, Any]]]:
    """
    Lectura en streaming: valida cada línea contra el schema y los
    invariantes. Produce (número de línea, registro, header).
    """
    import jsonschema

    schema = _load_schema("corpus_record.schema.json")
    validator = jsonschema.Draft7Validator(schema)
    header: Optional[Dict[str, Any]] = None
    try:
        f = open(path, 'r', encoding='utf-8')
    except FileNotFoundError:
        raise ValidationError(f"corpus not found: {path}") from None
    with f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, line_number, f"invalid JSON ({e.msg})") from None
            if header is None:
                if not isinstance(row, dict) or "header" not in row:
                    raise CorpusFormatError(path, line_number, "missing corpus header line")
                header = row["header"]
                for key in ("vocabulary", "object_classes", "feature_dim"):
                    if key not in header:
                        raise CorpusFormatError(path, line_number, f"header lacks '{key}'")
                continue
            problems = sorted(validator.iter_errors(row), key=lambda e: list(e.absolute_path))
            if problems:
                raise CorpusFormatError(path, line_number, problems[0].message)
            errors = _record_errors(row, header["feature_dim"], len(header["object_classes"]))
            if errors:
                raise CorpusFormatError(path, line_number, "; ".join(errors))
            regions = row["regions"]
            yield line_number, PairRecord(
                sentence=[w.lower() for w in row["sentence"]],
                nouns=sorted(row["nouns"]),
                features=np.array([r["feat"] for r in regions], dtype=np.float64),
                boxes=np.array([r["box"] for r in regions], dtype=np.float64),
                soft_labels=np.array([r["soft_label"] for r in regions], dtype=np.float64),
            ), header
    if header is None:
        raise CorpusFormatError(path, 1, "empty corpus file (no header)")


def load_corpus(path: str, seed: Optional[int] = None, shuffle: bool = True,
                limit: Optional[int] = None) -> Corpus:
    """Carga completa con barajado determinista bajo `seed`."""
    header: Dict[str, Any] = {}
    records: List[PairRecord] = []
    for _, record, header in iter_corpus(path):
        records.append(record)
    if not header:
        # corpus con n=0: solo header
        with open(path, 'r', encoding='utf-8') as f:
            header = json.loads(f.readline())["header"]
    if shuffle and seed is not None and records:
        order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,))).permutation(len(records))
        records = [records[i] for i in order]
    if limit is not None:
        records = records[:limit]
    vocab = Vocabulary.from_json(header["vocabulary"])
    return Corpus(header=header, vocabulary=vocab, object_classes=list(header["object_classes"]), records=records)


def read_manifest(out_dir: str) -> Dict[str, Any]:
    with open(Path(out_dir) / MANIFEST_FILE, 'r', encoding='utf-8') as f:
        return json.load(f)
