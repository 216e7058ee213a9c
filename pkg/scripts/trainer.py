#!/usr/bin/env python3
"""
DeVLBert Trainer v1.0
Orquestación de una corrida de preentrenamiento.

Flujo:
  1. Carga del corpus y dimensiones del modelo desde su header
  2. Modelo, cabezas y pesos externos opcionales (carga parcial del checkpoint)
  3. Pre-pasada de diccionarios de confusores (congelados o refrescados cada k pasos)
  4. Objetivos de intervención por (diseño, alcance)
  5. Bucle de pasos con métricas JSONL; en NaN se guarda el último estado finito

Uso:
  from trainer import PretrainRunner
  result = PretrainRunner(config).run()
"""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from common import log_info, log_pass, log_warn
from corpus import Corpus, load_corpus
from deconfound import (
    AnyDictionary,
    DictionaryRegistry,
    InterventionObjective,
    ScopeMode,
    build_joint_dictionary,
    build_language_dictionary,
    build_objective,
    build_vision_dictionary,
    save_dictionary,
)
from errors import NumericError, ValidationError
from metrics_collector import MetricsStream
from numerics import SGD, Adam, ParameterStore, no_grad
from pretraining import BatchPrefetcher, BatchSampler, LossReport, PretrainingHeads, training_step
from run_config import INFERRED_MODEL_FIELDS, RunConfig
from two_stream import ModelConfig, TwoStreamBert

SCOPE_DICTIONARIES = {
    ScopeMode.VISION_INTRA: ("vision",),
    ScopeMode.LANGUAGE_INTRA: ("language",),
    ScopeMode.INTER_MODAL: ("language", "vision", "joint"),
}


def resolve_model_config(config: RunConfig, corpus: Corpus) -> ModelConfig:
    """Completa vocab/clases/dimensión desde el corpus y verifica las fijadas a mano."""
    from_corpus = {
        "vocab_size": len(corpus.vocabulary),
        "num_object_classes": len(corpus.object_classes),
        "feature_dim": int(corpus.header["feature_dim"]),
    }
    values = {}
    errors = []
    for name in INFERRED_MODEL_FIELDS:
        current = getattr(config.model, name)
        if current == 0:
            values[name] = from_corpus[name]
        elif current != from_corpus[name]:
            errors.append(f"model.{name}={current} but the corpus has {from_corpus[name]}")
    if errors:
        raise ValidationError(errors)
    return replace(config.model, seed=config.training.seed, **values)


def model_from_checkpoint_meta(meta: Dict[str, Any]) -> ModelConfig:
    if "model" not in meta:
        raise ValidationError("checkpoint meta lacks the model configuration")
    return ModelConfig.from_dict(meta["model"])


@dataclass
class RunResult:
    steps_completed: int
    checkpoint: Optional[str]
    reports: List[LossReport] = field(default_factory=list)
    aborted: bool = False

    @property
    def totals(self) -> List[float]:
        return [r.total for r in self.reports]


class PretrainRunner:
    """Una corrida completa de preentrenamiento a partir de un RunConfig."""

    def __init__(self, config: RunConfig, corpus: Optional[Corpus] = None,
                 metrics: Optional[MetricsStream] = None, verbose: bool = False):
        self.config = config
        seed = config.training.seed
        self.corpus = corpus if corpus is not None else load_corpus(config.paths.corpus, seed=seed)
        if not len(self.corpus):
            raise ValidationError(f"corpus {config.paths.corpus} has no records")
        self.pairs = self.corpus.sequences()
        self.model_config = resolve_model_config(config, self.corpus)
        self.metrics = metrics if metrics is not None else MetricsStream(None)
        self.verbose = verbose

        root = np.random.SeedSequence(seed)
        model_seq, heads_seq, objectives_seq = root.spawn(3)
        self.store = ParameterStore()
        self.model = TwoStreamBert(self.model_config, self.store, np.random.default_rng(model_seq))
        self.heads = PretrainingHeads(self.store, self.model_config, np.random.default_rng(heads_seq))
        if config.paths.init_embeddings:
            self._load_external_embeddings(config.paths.init_embeddings)

        self.registry = DictionaryRegistry()
        self.dictionary_names = self._required_dictionaries()
        if self.dictionary_names:
            self.refresh_dictionaries(step=0)
        self.objectives = self._build_objectives(np.random.default_rng(objectives_seq))
        self.optimizer = self._build_optimizer()

    # ----- construcción -----

    def _load_external_embeddings(self, path: str) -> None:
        names = {"lang.embed.word", "lang.embed.position"}
        shapes = {name: self.store[name].shape for name in names}
        _, arrays = load_checkpoint(path, expected_shapes=shapes, only=names)
        if not arrays:
            raise ValidationError(f"{path} holds no language embedding records")
        self.store.load_state_dict(arrays, strict=False)
        log_info(f"Embeddings externos cargados: {sorted(arrays)}")

    def _required_dictionaries(self) -> List[str]:
        needed: List[str] = []
        for spec in self.config.designs:
            for name in SCOPE_DICTIONARIES[ScopeMode(spec.scope)]:
                if name not in needed:
                    needed.append(name)
        return needed

    def _build_objectives(self, rng: np.random.Generator) -> List[InterventionObjective]:
        mc = self.model_config
        dc = self.config.dictionaries
        return [
            build_objective(
                self.store, spec.design, spec.scope, self.registry,
                d_lang=mc.d_lang, d_vis=mc.d_vis,
                vocab_size=mc.vocab_size, num_object_classes=mc.num_object_classes,
                rng=rng, d_bilinear=dc.d_bilinear, std=mc.init_std,
                exclusion_enabled=spec.exclusion, alpha_mode=spec.alpha_mode,
                eps_den=dc.eps_den, stop_gradient=spec.clean_pass_stop_gradient,
            )
            for spec in self.config.designs
        ]

    def _build_optimizer(self):
        tc = self.config.training
        if tc.optimizer == "sgd":
            return SGD(self.store.parameters(), lr=tc.lr, momentum=tc.momentum)
        return Adam(self.store.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2),
                    eps=tc.eps, grad_clip=tc.grad_clip)

    # ----- diccionarios -----

    def build_dictionaries(self) -> Dict[str, AnyDictionary]:
        """Pre-pasada congelada sobre el corpus con los parámetros actuales."""
        dc = self.config.dictionaries
        built: Dict[str, AnyDictionary] = {}
        with no_grad():
            if "vision" in self.dictionary_names:
                if dc.vision_features == "contextual":
                    built["vision"] = self._contextual_vision_dictionary(dc.min_count)
                else:
                    built["vision"] = build_vision_dictionary([r for _, r in self.pairs], min_count=dc.min_count)
            if "language" in self.dictionary_names:
                built["language"] = build_language_dictionary(
                    self.pairs, lambda t, r: self.model(t, r).lang_final.numpy(), min_count=dc.min_count)
            if "joint" in self.dictionary_names:
                built["joint"] = build_joint_dictionary(built["language"], built["vision"])
        return built

    def _contextual_vision_dictionary(self, min_count: int):
        by_regions = {id(r): t for t, r in self.pairs}
        return build_vision_dictionary(
            [r for _, r in self.pairs],
            encoder=lambda r: self.model(by_regions[id(r)], r).vis_final.numpy(),
            min_count=min_count,
        )

    def refresh_dictionaries(self, step: int) -> None:
        built = self.build_dictionaries()
        self.registry.publish(built)
        self.metrics.record_dictionary_refresh(step, {k: v.size for k, v in built.items()}, self.registry.version)
        if self.config.paths.dictionaries_dir:
            for name, dictionary in built.items():
                save_dictionary(dictionary, str(Path(self.config.paths.dictionaries_dir) / f"{name}.json"))

    # ----- ejecución -----

    def checkpoint_meta(self, step: int) -> Dict[str, Any]:
        return {
            "model": self.model_config.to_dict(),
            "step": step,
            "preset": self.config.preset,
            "designs": [asdict(d) for d in self.config.designs],
            "vocabulary": self.corpus.vocabulary.to_json(),
            "object_classes": self.corpus.object_classes,
        }

    def save(self, step: int, state: Optional[Dict[str, np.ndarray]] = None) -> str:
        path = self.config.paths.checkpoint
        save_checkpoint(path, state if state is not None else self.store.state_dict(), self.checkpoint_meta(step))
        return path

    def run(self) -> RunResult:
        tc = self.config.training
        weights = self.config.weights()
        sampler = BatchSampler(self.pairs, self.config.effective_masking(), tc.batch_size,
                               self.model_config.vocab_size, tc.seed, self.config.objectives.negative_rate)
        self.metrics.record_run_start(self.config.preset, [o.name for o in self.objectives], tc.steps, tc.seed)

        prefetcher = BatchPrefetcher(sampler, tc.steps, depth=tc.prefetch) if tc.prefetch > 0 else None
        batches = iter(prefetcher) if prefetcher else (sampler.next_batch() for _ in range(tc.steps))

        reports: List[LossReport] = []
        last_good = self.store.state_dict()
        try:
            for step, batch in enumerate(batches, start=1):
                refresh = self.config.dictionaries.refresh_every
                if self.dictionary_names and refresh and step > 1 and (step - 1) % refresh == 0:
                    self.refresh_dictionaries(step)
                try:
                    report = training_step(batch, self.model, self.heads, weights, self.optimizer,
                                           self.objectives, self.config.objectives.mtm_aligned_only, step)
                except NumericError as e:
                    self.store.load_state_dict(last_good)
                    path = self.save(step - 1, last_good)
                    self.metrics.record_abort(step, str(e), e.diagnostics)
                    log_warn(f"Paso {step}: {e}; checkpoint del último estado finito en {path}")
                    raise
                reports.append(report)
                self.metrics.record_step(report.to_dict())
                last_good = self.store.state_dict()
                if self.verbose and tc.log_every and step % tc.log_every == 0:
                    log_info(f"paso {step}/{tc.steps} total={report.total:.4f}")
        finally:
            if prefetcher is not None:
                prefetcher.close()

        path = self.save(len(reports))
        self.metrics.record_run_end(len(reports), path)
        if self.verbose:
            log_pass(f"Entrenamiento completo: {len(reports)} pasos, checkpoint {path}")
        return RunResult(steps_completed=len(reports), checkpoint=path, reports=reports)


def load_trained(path: str):
    """Reconstruye (modelo, cabezas, meta) desde un checkpoint; ignora parámetros de intervención."""
    meta, arrays = load_checkpoint(path)
    config = model_from_checkpoint_meta(meta)
    store = ParameterStore()
    model = TwoStreamBert(config, store, np.random.default_rng(0))
    heads = PretrainingHeads(store, config, np.random.default_rng(0))
    missing = sorted(set(store.names()) - set(arrays))
    if missing:
        raise ValidationError(f"{path}: checkpoint lacks parameters {missing[:5]}")
    store.load_state_dict({k: v for k, v in arrays.items() if k in store}, strict=True)
    return model, heads, meta
