"""
Tests para pretraining.py
"""
import math

import numpy as np
import pytest

from corpus import generate_records
from errors import ValidationError
from numerics import Adam, ParameterStore, Tensor, cross_entropy_soft
from pretraining import (
    AlignmentHead,
    Batch,
    BatchPrefetcher,
    BatchSampler,
    MaskingPolicy,
    PretrainingHeads,
    alignment_loss,
    apply_masking,
    build_batch,
    default_weights,
    mlm_loss,
    mom_loss,
    training_step,
)
from two_stream import CLS_ID, Linear, MaskState, ModelConfig, RegionSequence, StreamOutput, TokenSequence, TwoStreamBert


@pytest.fixture
def planted_pairs(planted_spec):
    vocab = planted_spec.vocabulary
    return [r.to_sequences(vocab) for r in generate_records(planted_spec, 32)], len(vocab)


def _model_for(planted_spec, seed=0):
    config = ModelConfig(
        vocab_size=len(planted_spec.vocabulary),
        num_object_classes=len(planted_spec.object_classes),
        feature_dim=planted_spec.feature_dim,
        d_lang=8, d_vis=8, num_lang_layers=1, num_coattn_blocks=1, num_heads=2, ffn_width=12,
    )
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    model = TwoStreamBert(config, store, rng)
    heads = PretrainingHeads(store, config, rng)
    return model, heads, store


def _plain_pair(n_tokens=11, n_regions=10, feature_dim=4, classes=3, rng=None):
    rng = rng or np.random.default_rng(0)
    tokens = TokenSequence(ids=[CLS_ID] + [3 + (i % 5) for i in range(n_tokens - 1)])
    soft = np.full((n_regions, classes), 1.0 / classes)
    boxes = np.tile([0.1, 0.1, 0.5, 0.5, 0.16], (n_regions, 1))
    regions = RegionSequence.from_regions(rng.standard_normal((n_regions, feature_dim)), boxes, soft)
    return tokens, regions


class TestMasking:
    """Tests para apply_masking."""

    def test_zero_rates_identity(self):
        """Debe devolver la entrada sin cambios con tasas 0."""
        tokens, regions = _plain_pair()
        policy = MaskingPolicy(lang_mask_rate=0.0, vis_mask_rate=0.0)
        t, r = apply_masking(tokens, regions, policy, np.random.default_rng(0), 12)
        assert t.input_ids() == tokens.input_ids()
        assert not t.masked_positions() and not r.masked_positions()

    def test_full_rates(self):
        """Debe enmascarar toda posición enmascarable como masked_to_MASK."""
        tokens, regions = _plain_pair()
        policy = MaskingPolicy(lang_mask_rate=1.0, lang_to_mask=1.0, lang_keep=0.0, lang_random=0.0,
                               vis_mask_rate=1.0, vis_keep_original_rate=0.0)
        t, r = apply_masking(tokens, regions, policy, np.random.default_rng(0), 12)
        assert t.mask_states[0] is MaskState.UNMASKED
        assert all(s is MaskState.MASKED_TO_MASK for s in t.mask_states[1:])
        assert r.mask_states[0] is MaskState.UNMASKED
        assert all(s is MaskState.MASKED_TO_MASK for s in r.mask_states[1:])

    def test_language_rate_binomial(self):
        """Debe quedar dentro de 0.15 +- 3 sigma en 10.000 sorteos."""
        tokens, regions = _plain_pair()
        rng = np.random.default_rng(42)
        policy = MaskingPolicy()
        masked = 0
        for _ in range(1000):
            t, _ = apply_masking(tokens, regions, policy, rng, 12)
            masked += len(t.masked_positions())
        n = 1000 * (len(tokens) - 1)
        sigma = math.sqrt(0.15 * 0.85 / n)
        assert abs(masked / n - 0.15) <= 3 * sigma

    def test_keep_original_rate_binomial(self):
        """Debe conservar el original en 0.10 +- 3 sigma de 10.000 regiones enmascaradas."""
        tokens, regions = _plain_pair()
        rng = np.random.default_rng(7)
        policy = MaskingPolicy(vis_mask_rate=1.0)
        kept = 0
        for _ in range(1000):
            _, r = apply_masking(tokens, regions, policy, rng, 12)
            kept += sum(1 for s in r.mask_states if s is MaskState.MASKED_KEPT_ORIGINAL)
        n = 1000 * regions.num_regions
        sigma = math.sqrt(0.10 * 0.90 / n)
        assert abs(kept / n - 0.10) <= 3 * sigma

    def test_random_words_skip_specials(self):
        """Debe sortear palabras aleatorias fuera de [CLS] y [MASK]."""
        tokens, regions = _plain_pair()
        policy = MaskingPolicy(lang_mask_rate=1.0, lang_to_mask=0.0, lang_keep=0.0, lang_random=1.0)
        rng = np.random.default_rng(3)
        for _ in range(50):
            t, _ = apply_masking(tokens, regions, policy, rng, 12)
            assert all(2 <= v < 12 for v in t.replacement_ids.values())
            assert t.ids == tokens.ids

    def test_noun_only(self):
        """Debe enmascarar solo sustantivos con noun_only."""
        tokens = TokenSequence(ids=[CLS_ID, 3, 4, 5], is_noun=[False, True, False, True])
        _, regions = _plain_pair()
        policy = MaskingPolicy(lang_mask_rate=1.0, noun_only=True)
        t, _ = apply_masking(tokens, regions, policy, np.random.default_rng(0), 12)
        assert t.masked_positions() == [1, 3]

    def test_rejects_masked_input(self):
        """Debe rechazar un par ya enmascarado."""
        tokens, regions = _plain_pair()
        policy = MaskingPolicy(lang_mask_rate=1.0)
        t, r = apply_masking(tokens, regions, policy, np.random.default_rng(0), 12)
        with pytest.raises(ValidationError):
            apply_masking(t, r, policy, np.random.default_rng(0), 12)

    def test_policy_split_validation(self):
        """Debe exigir que el reparto 80/10/10 sume 1."""
        assert MaskingPolicy(lang_to_mask=0.5).validate()
        assert MaskingPolicy().validate() == []


class TestLosses:
    """Tests para MLM, MOM y alineación."""

    def test_mlm_no_masked(self):
        """Debe dar una pérdida vacía sin posiciones enmascaradas."""
        tokens, _ = _plain_pair()
        out = StreamOutput(Tensor(np.ones((len(tokens), 4))), Tensor(np.ones((2, 4))))
        term = mlm_loss(out, tokens, Tensor(np.ones((12, 4))))
        assert term.is_empty and term.value.item() == 0.0

    def test_mlm_uniform_logits(self):
        """Debe valer log 512 con logits uniformes."""
        tokens = TokenSequence(ids=[CLS_ID, 7, 9], mask_states=[MaskState.UNMASKED, MaskState.MASKED_TO_MASK,
                                                                MaskState.MASKED_TO_MASK])
        out = StreamOutput(Tensor(np.random.default_rng(0).standard_normal((3, 4))), Tensor(np.ones((2, 4))))
        term = mlm_loss(out, tokens, Tensor(np.zeros((512, 4))), Tensor(np.zeros(512)))
        assert abs(term.value.item() - math.log(512)) < 1e-9
        assert term.count == 2

    def test_mlm_one_token_oracle(self, rng):
        """Debe coincidir con cross_entropy_soft sobre un objetivo one-hot."""
        tokens = TokenSequence(ids=[CLS_ID, 5], mask_states=[MaskState.UNMASKED, MaskState.MASKED_KEPT])
        lang = rng.standard_normal((2, 4))
        table = rng.standard_normal((8, 4))
        out = StreamOutput(Tensor(lang), Tensor(np.ones((2, 4))))
        target = np.zeros((1, 8))
        target[0, 5] = 1.0
        expected = cross_entropy_soft(Tensor(lang[1:2] @ table.T), target).item()
        assert abs(mlm_loss(out, tokens, Tensor(table)).value.item() - expected) < 1e-12

    def test_mlm_excluded_positions(self):
        """Debe omitir las posiciones reemplazadas por la intervención."""
        tokens = TokenSequence(ids=[CLS_ID, 5, 6], mask_states=[MaskState.UNMASKED, MaskState.MASKED_TO_MASK,
                                                                MaskState.MASKED_TO_MASK])
        out = StreamOutput(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))
        assert mlm_loss(out, tokens, Tensor(np.ones((8, 4))), exclude_positions=[1]).count == 1

    def test_mom_gibbs_bound(self, rng):
        """Debe ser >= log 32 con etiquetas suaves uniformes, con igualdad en logits uniformes."""
        regions = RegionSequence(
            features=np.ones((2, 3)), boxes=np.tile([0.0, 0.0, 1.0, 1.0, 1.0], (2, 1)),
            soft_labels=np.full((2, 32), 1.0 / 32), mask_states=[MaskState.UNMASKED, MaskState.MASKED_TO_MASK])
        store = ParameterStore()
        classifier = Linear(store, "mom", 4, 32, rng, std=1.0)
        out = StreamOutput(Tensor(np.ones((1, 4))), Tensor(rng.standard_normal((2, 4))))
        assert mom_loss(out, regions, classifier).value.item() >= math.log(32) - 1e-12
        classifier.weight.data[:] = 0.0
        assert abs(mom_loss(out, regions, classifier).value.item() - math.log(32)) < 1e-12

    def test_mom_no_masked(self, rng):
        """Debe dar una pérdida vacía sin regiones enmascaradas."""
        _, regions = _plain_pair()
        classifier = Linear(ParameterStore(), "mom", 4, 3, rng)
        out = StreamOutput(Tensor(np.ones((1, 4))), Tensor(np.ones((len(regions), 4))))
        assert mom_loss(out, regions, classifier).is_empty

    def test_alignment_zero_logit(self, rng):
        """Debe valer log 2 con logit 0 para ambas etiquetas."""
        head = AlignmentHead(ParameterStore(), "align", 4, 4, 4, rng, 0.02)
        head.outer.weight.data[:] = 0.0
        out = StreamOutput(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((2, 4))))
        for aligned in (True, False):
            assert abs(alignment_loss(out, aligned, head).value.item() - math.log(2)) < 1e-12

    def test_alignment_separating(self, rng):
        """Debe bajar de 1e-8 con logit +-20."""
        head = AlignmentHead(ParameterStore(), "align", 4, 4, 4, rng, 0.02)
        head.outer.weight.data[:] = 0.0
        out = StreamOutput(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))
        head.outer.bias.data[:] = 20.0
        assert alignment_loss(out, True, head).value.item() < 1e-8
        head.outer.bias.data[:] = -20.0
        assert alignment_loss(out, False, head).value.item() < 1e-8


class TestBatches:
    """Tests para la construcción de lotes."""

    def test_negatives_keep_image(self, planted_pairs):
        """Debe cambiar la oración y conservar la imagen en los negativos."""
        pairs, vocab_size = planted_pairs
        batch = build_batch(pairs, list(range(8)), MaskingPolicy(lang_mask_rate=0.0, vis_mask_rate=0.0),
                            np.random.default_rng(0), vocab_size, negative_rate=1.0)
        assert batch.num_aligned == 0
        for i, example in enumerate(batch.examples):
            assert np.array_equal(example.regions.features, pairs[i][1].features)

    def test_sampler_deterministic(self, planted_pairs):
        """Debe repetir la secuencia de lotes con la misma semilla."""
        pairs, vocab_size = planted_pairs
        a = BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=5)
        b = BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=5)
        for _ in range(3):
            ba, bb = a.next_batch(), b.next_batch()
            assert [e.tokens.input_ids() for e in ba.examples] == [e.tokens.input_ids() for e in bb.examples]

    def test_prefetcher_matches_sequential(self, planted_pairs):
        """Debe producir los mismos lotes que el muestreo secuencial."""
        pairs, vocab_size = planted_pairs
        sequential = BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=9)
        expected = [sequential.next_batch() for _ in range(5)]
        prefetched = list(BatchPrefetcher(BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=9), 5, depth=2))
        assert len(prefetched) == 5
        for a, b in zip(expected, prefetched):
            assert [e.tokens.input_ids() for e in a.examples] == [e.tokens.input_ids() for e in b.examples]
            assert [e.aligned for e in a.examples] == [e.aligned for e in b.examples]


class TestTrainingStep:
    """Tests para training_step."""

    def test_zero_weights_keep_parameters(self, planted_spec, planted_pairs):
        """Debe dejar los parámetros intactos con todos los pesos en 0."""
        pairs, vocab_size = planted_pairs
        model, heads, store = _model_for(planted_spec)
        before = store.state_dict()
        batch = BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=0).next_batch()
        training_step(batch, model, heads, {"mlm": 0.0, "mom": 0.0, "align": 0.0}, Adam(store.parameters()))
        after = store.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_zero_weights_after_real_step(self, planted_spec, planted_pairs):
        """Debe dejar los parámetros intactos aunque Adam ya tenga momentos acumulados."""
        pairs, vocab_size = planted_pairs
        model, heads, store = _model_for(planted_spec)
        optimizer = Adam(store.parameters(), lr=1e-2)
        sampler = BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=0)
        training_step(sampler.next_batch(), model, heads, default_weights(), optimizer, step=1)
        before = store.state_dict()
        report = training_step(sampler.next_batch(), model, heads, {"mlm": 0.0, "mom": 0.0, "align": 0.0},
                               optimizer, step=2)
        after = store.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert optimizer.step_count == 1
        assert report.total == 0.0

    def test_report_keys(self, planted_spec, planted_pairs):
        """Debe reportar exactamente los objetivos habilitados."""
        pairs, vocab_size = planted_pairs
        model, heads, store = _model_for(planted_spec)
        batch = BatchSampler(pairs, MaskingPolicy(), 4, vocab_size, seed=0).next_batch()
        report = training_step(batch, model, heads, {"mlm": 1.0, "align": 1.0}, Adam(store.parameters()), step=3)
        assert set(report.to_dict()) == {"step", "mlm", "align", "total"}
        assert report.step == 3
        assert report.encoder_passes == len(batch)
        assert all(v >= 0 for v in report.losses.values())

    def test_negative_pairs_only_alignment(self, planted_spec, planted_pairs):
        """Debe limitar los pares negativos a la pérdida de alineación."""
        pairs, vocab_size = planted_pairs
        model, heads, store = _model_for(planted_spec)
        batch = build_batch(pairs, [0, 1, 2], MaskingPolicy(lang_mask_rate=1.0, vis_mask_rate=1.0),
                            np.random.default_rng(0), vocab_size, negative_rate=1.0)
        training_step(batch, model, heads, {"mlm": 1.0, "mom": 1.0}, Adam(store.parameters()))
        assert store["heads.mlm.bias"].grad is None
        assert store["heads.mom.weight"].grad is None

    def test_empty_batch(self, planted_spec):
        """Debe rechazar lotes vacíos."""
        model, heads, store = _model_for(planted_spec)
        with pytest.raises(ValidationError):
            training_step(Batch([]), model, heads, default_weights(), Adam(store.parameters()))

    @pytest.mark.slow
    def test_smoke_training_lowers_loss(self, planted_spec, planted_pairs):
        """Debe bajar la pérdida total tras 200 pasos sobre 32 pares."""
        pairs, vocab_size = planted_pairs
        model, heads, store = _model_for(planted_spec)
        sampler = BatchSampler(pairs, MaskingPolicy(), 8, vocab_size, seed=0)
        optimizer = Adam(store.parameters(), lr=1e-3)
        totals = [training_step(sampler.next_batch(), model, heads, default_weights(), optimizer, step=s).total
                  for s in range(200)]
        assert np.mean(totals[-20:]) < np.mean(totals[:20])
