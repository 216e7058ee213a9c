"""
DeVLBert Tests - Configuración compartida (fixtures).
"""
import sys
import tempfile
from pathlib import Path

# Añadir scripts al path
SCRIPTS_DIR = Path(__file__).parent.parent / "scripts"
sys.path.insert(0, str(SCRIPTS_DIR))

import numpy as np
import pytest

from corpus import generate, load_generator_spec
from two_stream import ModelConfig

PROJECT_ROOT = Path(__file__).parent.parent


@pytest.fixture
def temp_dir():
    """Crea un directorio temporal para tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def project_root():
    """Retorna la raíz del proyecto."""
    return PROJECT_ROOT


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Backbone mínimo para pruebas rápidas y chequeos de gradiente."""
    return ModelConfig(
        vocab_size=12,
        num_object_classes=5,
        feature_dim=6,
        d_lang=8,
        d_vis=8,
        num_lang_layers=1,
        num_coattn_blocks=1,
        num_heads=2,
        ffn_width=12,
        max_lang_len=10,
        max_regions=6,
    )


@pytest.fixture
def planted_spec(project_root):
    """Spec fija de confusores plantados del repositorio."""
    return load_generator_spec(str(project_root / "config" / "planted_spec.json"))


@pytest.fixture
def tiny_corpus_dir(temp_dir, planted_spec):
    """Corpus sintético de 24 pares escrito en un directorio temporal."""
    out_dir = temp_dir / "corpus"
    generate(planted_spec, 24, str(out_dir))
    return out_dir


def tiny_run_overrides(corpus_dir: Path, out_dir: Path, steps: int = 3) -> dict:
    """Flags con punto para una corrida diminuta."""
    return {
        "model.d_lang": 8,
        "model.d_vis": 8,
        "model.num_heads": 2,
        "model.ffn_width": 12,
        "model.num_lang_layers": 1,
        "model.num_coattn_blocks": 1,
        "dictionaries.d_bilinear": 4,
        "training.steps": steps,
        "training.batch_size": 4,
        "paths.corpus": str(corpus_dir / "corpus.jsonl"),
        "paths.checkpoint": str(out_dir / "model.ckpt"),
        "paths.metrics": str(out_dir / "metrics.jsonl"),
    }
