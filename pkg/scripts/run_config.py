#!/usr/bin/env python3
"""
DeVLBert Run Config v1.0
Configuración de una corrida de preentrenamiento.

Orden de resolución (cada capa pisa a la anterior):
  1. valores por defecto de los dataclasses
  2. archivo JSON (--config)
  3. preset (--preset, config/presets.json)
  4. flags del CLI (claves con punto: "training.steps")
  5. entorno: DEVLBERT_SEED -> training.seed

Validación en dos fases: schema JSON (jsonschema) y reglas (diseños,
alcances, dimensiones, rutas).

Uso:
  from run_config import load_run_config
  config = load_run_config("config/run_default.json", preset="D-VLC")
"""

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from errors import ValidationError
from pretraining import BASE_OBJECTIVES, MaskingPolicy
from two_stream import ModelConfig

PROJECT_ROOT = Path(__file__).parent.parent
SCHEMA_PATH = PROJECT_ROOT / "schemas" / "run_config.schema.json"
PRESETS_PATH = PROJECT_ROOT / "config" / "presets.json"
SEED_ENV = "DEVLBERT_SEED"

DESIGNS = ("A", "B", "C", "D")
SCOPES = ("vision_intra", "language_intra", "inter_modal")
# vocab, clases y dimensión de features salen del header del corpus cuando valen 0
INFERRED_MODEL_FIELDS = ("vocab_size", "num_object_classes", "feature_dim")


@dataclass
class ObjectiveConfig:
    mlm: bool = True
    mom: bool = True
    align: bool = True
    weights: Dict[str, float] = field(default_factory=dict)
    mtm_aligned_only: bool = True
    negative_rate: float = 0.5

    def enabled(self) -> List[str]:
        return [name for name in BASE_OBJECTIVES if getattr(self, name)]


@dataclass
class DesignSpec:
    design: str
    scope: str
    alpha_mode: str = "ratio"
    exclusion: bool = True
    clean_pass_stop_gradient: bool = True
    weight: float = 1.0

    @property
    def name(self) -> str:
        return f"intervention_{self.design}_{self.scope}"


@dataclass
class DictionaryConfig:
    min_count: int = 2
    refresh_every: int = 0
    vision_features: str = "raw"
    d_bilinear: int = 32
    eps_den: float = 1e-8


@dataclass
class TrainingConfig:
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    grad_clip: float = 0.0
    prefetch: int = 0
    log_every: int = 0


@dataclass
class PathsConfig:
    corpus: str = ""
    checkpoint: str = "runs/model.ckpt"
    metrics: str = "runs/metrics.jsonl"
    init_embeddings: str = ""
    dictionaries_dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    designs: List[DesignSpec] = field(default_factory=list)
    dictionaries: DictionaryConfig = field(default_factory=DictionaryConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    preset: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def effective_masking(self) -> MaskingPolicy:
        """Con A/B en el lado del lenguaje solo se enmascaran sustantivos."""
        language_ab = any(d.design in ("A", "B") and d.scope in ("language_intra", "inter_modal")
                          for d in self.designs)
        return replace(self.masking, noun_only=True) if language_ab else self.masking

    def weights(self) -> Dict[str, float]:
        out = {name: float(self.objectives.weights.get(name, 1.0)) for name in self.objectives.enabled()}
        for spec in self.designs:
            out[spec.name] = float(self.objectives.weights.get(spec.name, spec.weight))
        return out

    def with_model(self, **values: Any) -> "RunConfig":
        return replace(self, model=replace(self.model, **values))


def default_config_dict() -> Dict[str, Any]:
    return RunConfig(model=ModelConfig(vocab_size=0, num_object_classes=0, feature_dim=0)).to_dict()


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict) and key != "weights":
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ValidationError(f"unknown config key '{dotted}'")
        node = node[part]
    if parts[-1] not in node:
        raise ValidationError(f"unknown config key '{dotted}'")
    node[parts[-1]] = value


def _build(cls, data: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"{section}: unknown keys {unknown}")
    return cls(**data)


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    return RunConfig(
        model=_build(ModelConfig, data["model"], "model"),
        masking=_build(MaskingPolicy, data.get("masking", {}), "masking"),
        objectives=_build(ObjectiveConfig, data.get("objectives", {}), "objectives"),
        designs=[_build(DesignSpec, d, "designs[]") for d in data.get("designs", [])],
        dictionaries=_build(DictionaryConfig, data.get("dictionaries", {}), "dictionaries"),
        training=_build(TrainingConfig, data.get("training", {}), "training"),
        paths=_build(PathsConfig, data.get("paths", {}), "paths"),
        preset=data.get("preset"),
    )


def validate_schema(data: Mapping[str, Any]) -> List[str]:
    """Errores del schema JSON (todos, no solo el primero)."""
    import jsonschema

    with open(SCHEMA_PATH, 'r', encoding='utf-8') as f:
        schema = json.load(f)
    validator = jsonschema.Draft7Validator(schema)
    errors = []
    for error in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        errors.append(f"{where}: {error.message}")
    return errors


def validate_rules(config: RunConfig, check_paths: bool = True) -> List[str]:
    errors = []
    model = config.model
    inferred = [name for name in INFERRED_MODEL_FIELDS if getattr(model, name) == 0]
    probe = replace(model, **{name: 8 for name in inferred}) if inferred else model
    errors.extend(probe.validate())
    errors.extend(config.masking.validate())

    seen = set()
    for spec in config.designs:
        if spec.design not in DESIGNS:
            errors.append(f"designs: unknown design '{spec.design}'")
        if spec.scope not in SCOPES:
            errors.append(f"designs: unknown scope '{spec.scope}'")
        if spec.alpha_mode not in ("ratio", "softmax"):
            errors.append(f"designs: unknown alpha_mode '{spec.alpha_mode}'")
        if spec.scope == "inter_modal" and model.d_lang != model.d_vis:
            errors.append(f"designs: inter_modal requires d_lang == d_vis (got {model.d_lang}, {model.d_vis})")
        if (spec.design, spec.scope) in seen:
            errors.append(f"designs: duplicate ({spec.design}, {spec.scope})")
        seen.add((spec.design, spec.scope))
        if spec.weight < 0:
            errors.append(f"designs: negative weight for {spec.name}")

    if any(w < 0 for w in config.objectives.weights.values()):
        errors.append("objectives.weights must be nonnegative")
    if not 0.0 <= config.objectives.negative_rate <= 1.0:
        errors.append("objectives.negative_rate outside [0, 1]")
    if config.dictionaries.min_count < 1:
        errors.append("dictionaries.min_count must be >= 1")
    if config.dictionaries.refresh_every < 0:
        errors.append("dictionaries.refresh_every must be >= 0")
    if config.dictionaries.vision_features not in ("raw", "contextual"):
        errors.append("dictionaries.vision_features must be raw or contextual")
    training = config.training
    if training.steps < 0:
        errors.append("training.steps must be >= 0")
    if training.batch_size <= 0:
        errors.append("training.batch_size must be positive")
    if training.optimizer not in ("adam", "sgd"):
        errors.append("training.optimizer must be adam or sgd")
    if training.lr <= 0:
        errors.append("training.lr must be positive")

    if check_paths:
        if not config.paths.corpus:
            errors.append("paths.corpus is required")
        elif not Path(config.paths.corpus).exists():
            errors.append(f"paths.corpus does not exist: {config.paths.corpus}")
        if config.paths.init_embeddings and not Path(config.paths.init_embeddings).exists():
            errors.append(f"paths.init_embeddings does not exist: {config.paths.init_embeddings}")
    return errors


def load_presets(path: Path = PRESETS_PATH) -> Dict[str, Dict[str, Any]]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_run_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
    check_paths: bool = True,
) -> RunConfig:
    data = default_config_dict()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = _deep_merge(data, json.load(f))
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from None

    if preset:
        presets = load_presets()
        if preset not in presets:
            raise ValidationError(f"unknown preset '{preset}' (available: {sorted(presets)})")
        data = _deep_merge(data, presets[preset])
        data["preset"] = preset

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)

    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            data["training"]["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ValidationError(f"{SEED_ENV} must be an integer, got '{env[SEED_ENV]}'") from None

    errors = validate_schema(data)
    if errors:
        raise ValidationError(errors)
    config = config_from_dict(data)
    errors = validate_rules(config, check_paths=check_paths)
    if errors:
        raise ValidationError(errors)
    return config
