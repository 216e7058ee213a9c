"""
Tests para deconfound.py
"""
import math

import numpy as np
import pytest

from deconfound import (
    ConfounderDictionary,
    Design,
    DictionaryRegistry,
    InterventionHead,
    InterventionObjective,
    InterventionScope,
    Modality,
    RSample,
    ScopeMode,
    TokenRef,
    XYSample,
    build_joint_dictionary,
    build_language_dictionary,
    build_objective,
    build_vision_dictionary,
    intervention_loss,
    load_dictionary,
    normalize_importance,
    save_dictionary,
    select_r_design_D,
    select_xy_design_A,
    select_xy_design_B,
)
from errors import ValidationError
from numerics import Adam, ParameterStore, Tensor, gradient_check
from pretraining import MaskingPolicy, PretrainingHeads, build_batch, training_step
from two_stream import CLS_ID, MaskState, RegionSequence, StreamOutput, TokenSequence, TwoStreamBert


def _dictionary(rng, m=4, d=6, modality=Modality.VISION, class_ids=None):
    priors = rng.random(m) + 0.1
    return ConfounderDictionary(
        modality=modality,
        class_ids=class_ids if class_ids is not None else list(range(m)),
        features=rng.standard_normal((m, d)),
        priors=priors / priors.sum(),
    )


def _regions(rng, n, feature_dim=6, classes=5, states=None):
    soft = rng.random((n, classes)) + 0.05
    soft /= soft.sum(axis=1, keepdims=True)
    boxes = np.tile([0.1, 0.2, 0.6, 0.7, 0.25], (n, 1))
    seq = RegionSequence.from_regions(rng.standard_normal((n, feature_dim)), boxes, soft)
    if states is not None:
        seq = RegionSequence(seq.features, seq.boxes, seq.soft_labels, [MaskState.UNMASKED] + list(states))
    return seq


def _fake_output(rng, n_tokens, n_regions_plus_one, d=8):
    return StreamOutput(Tensor(rng.standard_normal((n_tokens, d))), Tensor(rng.standard_normal((n_regions_plus_one, d))))


def _head(design, rng, d_x=8, d_z=6, target=5, **kwargs):
    return InterventionHead(ParameterStore(), "h", design, d_x, d_z, target, rng, d_bilinear=4, **kwargs)


def _ratio_oracle(y, head, z, excluded):
    q = y @ head.query_projection.weight.data
    k = z @ head.key_projection.weight.data
    scores = (q @ k.T)[0]
    keep = [i for i in range(len(scores)) if i != excluded]
    den = sum(scores[i] for i in keep)
    out = np.zeros(len(scores))
    for i in keep:
        out[i] = scores[i] / den
    return out


class TestDictionaries:
    """Tests para la construcción de diccionarios de confusores."""

    def test_single_class(self, rng):
        """Debe dar una entrada con prior 1 y la media de las features."""
        seqs = []
        for _ in range(3):
            soft = np.tile([1.0, 0.0, 0.0], (2, 1))
            seqs.append(RegionSequence.from_regions(rng.standard_normal((2, 4)), np.tile([0, 0, 1, 1, 1.0], (2, 1)), soft))
        d = build_vision_dictionary(seqs, min_count=1)
        assert d.class_ids == [0]
        assert d.priors.tolist() == [1.0]
        all_rows = np.vstack([s.features[1:] for s in seqs])
        assert np.allclose(d.features[0], all_rows.mean(axis=0))

    def test_counts_three_and_one(self, rng):
        """Debe asignar priors 0.75 / 0.25 a conteos 3 y 1."""
        soft = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        seq = RegionSequence.from_regions(rng.standard_normal((4, 3)), np.tile([0, 0, 1, 1, 1.0], (4, 1)), soft)
        d = build_vision_dictionary([seq], min_count=1)
        assert np.allclose(d.priors, [0.75, 0.25])

    def test_grouping_oracle(self, rng):
        """Debe coincidir con una agrupación por fuerza bruta en 5 clases."""
        seqs = [_regions(rng, int(rng.integers(1, 5)), feature_dim=3, classes=5) for _ in range(30)]
        d = build_vision_dictionary(seqs, min_count=1)
        groups = {}
        for s in seqs:
            for pos in range(1, len(s)):
                groups.setdefault(int(s.soft_labels[pos].argmax()), []).append(s.features[pos])
        total = sum(len(v) for v in groups.values())
        assert d.class_ids == sorted(groups)
        for i, c in enumerate(d.class_ids):
            assert np.allclose(d.features[i], np.mean(groups[c], axis=0))
            assert abs(d.priors[i] - len(groups[c]) / total) < 1e-12

    def test_min_count_too_large(self, rng):
        """Debe lanzar ValidationError si ninguna clase llega a min_count."""
        with pytest.raises(ValidationError):
            build_vision_dictionary([_regions(rng, 3)], min_count=100)

    def test_min_count_renormalizes(self, rng):
        """Debe renormalizar los priors al descartar clases raras."""
        soft = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        seq = RegionSequence.from_regions(rng.standard_normal((3, 3)), np.tile([0, 0, 1, 1, 1.0], (3, 1)), soft)
        d = build_vision_dictionary([seq], min_count=2)
        assert d.class_ids == [0] and d.priors.tolist() == [1.0]

    def test_priors_invariant_to_duplication(self, rng):
        """Debe conservar los priors al duplicar el corpus k veces."""
        seqs = [_regions(rng, 3) for _ in range(10)]
        base = build_vision_dictionary(seqs, min_count=1)
        tripled = build_vision_dictionary(seqs * 3, min_count=1)
        assert np.allclose(base.priors, tripled.priors, atol=1e-15)
        assert np.allclose(base.features, tripled.features)

    def test_language_noun_twice(self, rng):
        """Debe promediar los dos embeddings de un sustantivo con prior 1."""
        e1, e2 = rng.standard_normal(4), rng.standard_normal(4)
        t1 = TokenSequence(ids=[CLS_ID, 5, 3], is_noun=[False, True, False])
        t2 = TokenSequence(ids=[CLS_ID, 4, 5], is_noun=[False, False, True])
        rows = {id(t1): np.vstack([np.zeros(4), e1, np.ones(4)]), id(t2): np.vstack([np.zeros(4), np.ones(4), e2])}
        region = _regions(rng, 1)
        d = build_language_dictionary([(t1, region), (t2, region)], lambda t, r: rows[id(t)], min_count=2)
        assert d.class_ids == [5]
        assert np.allclose(d.features[0], (e1 + e2) / 2)
        assert d.priors.tolist() == [1.0]

    def test_priors_must_sum_to_one(self):
        """Debe rechazar priors que no suman 1."""
        with pytest.raises(ValidationError):
            ConfounderDictionary(Modality.VISION, [0, 1], np.zeros((2, 3)), np.array([0.5, 0.6]))

    def test_joint_dictionary(self, rng):
        """Debe unir lenguaje y visión con priors renormalizados y clave (modalidad, clase)."""
        joint = build_joint_dictionary(_dictionary(rng, 2, 8, Modality.LANGUAGE, [7, 9]), _dictionary(rng, 3))
        assert joint.size == 5
        assert abs(joint.priors.sum() - 1.0) < 1e-12
        assert joint.index_of(("language", 9)) == 1
        assert joint.index_of(("vision", 0)) == 2

    def test_save_and_load(self, temp_dir, rng):
        """Debe recuperar un diccionario conjunto desde JSON validado por schema."""
        joint = build_joint_dictionary(_dictionary(rng, 2, 8, Modality.LANGUAGE, [7, 9]), _dictionary(rng, 3))
        path = save_dictionary(joint, str(temp_dir / "joint.json"))
        loaded = load_dictionary(str(path))
        assert loaded.class_keys == joint.class_keys
        assert np.allclose(loaded.priors, joint.priors)

    def test_registry_versions(self, rng):
        """Debe sustituir diccionarios y aumentar la versión en cada publicación."""
        registry = DictionaryRegistry()
        registry.publish({"vision": _dictionary(rng)})
        first = registry.get("vision")
        registry.publish({"vision": _dictionary(rng)})
        assert registry.version == 2
        assert registry.get("vision") is not first
        with pytest.raises(ValidationError):
            registry.get("language")


class TestAlphaWeights:
    """Tests para los pesos de importancia alpha."""

    def test_single_entry_is_one(self):
        """Debe dar peso 1 a la única entrada no excluida sea cual sea el signo."""
        for value in (-3.0, 0.7):
            weights = normalize_importance(Tensor([[value, 5.0]]), excluded=1).numpy()
            assert weights.tolist() == [[1.0, 0.0]]

    def test_symmetry(self):
        """Debe repartir [0.5, 0.5] con productos iguales."""
        assert np.allclose(normalize_importance(Tensor([[2.0, 2.0]])).numpy(), [[0.5, 0.5]])

    def test_exclusion_oracle(self, rng):
        """Debe coincidir con el oráculo escalar excluyendo la entrada 2."""
        head = _head(Design.A, rng, std=1.0)
        dictionary = _dictionary(rng, 4)
        y = rng.standard_normal((1, 8))
        alpha = head.alpha_weights(Tensor(y), dictionary, exclude_class=("vision", 2)).numpy()[0]
        assert alpha[2] == 0.0
        assert abs(alpha.sum() - 1.0) < 1e-9
        assert np.allclose(alpha, _ratio_oracle(y, head, dictionary.features, 2), atol=1e-12)

    def test_invariants_on_random_dictionaries(self):
        """Debe cumplir exclusión exacta, suma 1 e invarianza al reescalado en 100 diccionarios."""
        rng = np.random.default_rng(99)
        for _ in range(100):
            m = int(rng.integers(2, 7))
            head = _head(Design.C, rng, std=1.0)
            dictionary = _dictionary(rng, m)
            excluded = int(rng.integers(m))
            y = Tensor(rng.standard_normal((1, 8)))
            alpha = head.alpha_weights(y, dictionary, ("vision", excluded)).numpy()[0]
            assert alpha[excluded] == 0.0
            assert abs(alpha.sum() - 1.0) < 1e-9
            c = float(rng.uniform(0.1, 10.0))
            scaled = ConfounderDictionary(Modality.VISION, dictionary.class_ids, dictionary.features * c,
                                          dictionary.priors)
            alpha_scaled = head.alpha_weights(y, scaled, ("vision", excluded)).numpy()[0]
            assert np.allclose(alpha, alpha_scaled, rtol=1e-9, atol=1e-9)

    def test_denominator_fallback(self):
        """Debe caer a pesos uniformes con denominador casi nulo."""
        weights = normalize_importance(Tensor([[1.0, -1.0, 0.0]])).numpy()
        assert np.allclose(weights, [[1 / 3, 1 / 3, 1 / 3]])

    def test_softmax_mode(self):
        """Debe normalizar con softmax y dejar 0 en la excluida."""
        weights = normalize_importance(Tensor([[0.0, 3.0, 0.0]]), excluded=1, mode="softmax").numpy()
        assert np.allclose(weights, [[0.5, 0.0, 0.5]])

    def test_design_d_ignores_exclusion(self, rng):
        """Debe usar todas las entradas en el diseño D."""
        head = _head(Design.D, rng, std=1.0)
        alpha = head.alpha_weights(Tensor(rng.standard_normal((1, 8))), _dictionary(rng, 3), ("vision", 1)).numpy()
        assert alpha[0, 1] != 0.0


class TestInterventionHead:
    """Tests para los logits de intervención."""

    def test_single_entry_reduces_to_classifier(self, rng):
        """Debe reducirse a W_c [x, z] con un diccionario de una entrada."""
        head = _head(Design.A, rng, std=0.5)
        dictionary = ConfounderDictionary(Modality.VISION, [0], rng.standard_normal((1, 6)), np.array([1.0]))
        x, y = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
        logits = head.logits(Tensor(x), Tensor(y), dictionary).numpy()
        features = np.hstack([x, dictionary.features])
        expected = features @ head.classifier.weight.data + head.classifier.bias.data
        assert np.allclose(logits, expected, atol=1e-12)

    def test_pooled_oracle(self, rng):
        """Debe ponderar cada z por P(z) alpha(z) (oráculo escalar sobre entradas)."""
        head = _head(Design.D, rng, std=0.5)
        dictionary = _dictionary(rng, 3)
        r = rng.standard_normal((1, 8))
        alpha = _ratio_oracle(r, head, dictionary.features, None)
        pooled = sum(dictionary.priors[i] * alpha[i] * dictionary.features[i] for i in range(3))
        expected = pooled @ head.classifier.weight.data + head.classifier.bias.data
        assert np.allclose(head.logits(None, Tensor(r), dictionary).numpy()[0], expected, atol=1e-12)

    def test_zero_wz_uniform_fallback(self, rng):
        """Debe promediar con alpha uniforme cuando W_z es nula."""
        head = _head(Design.D, rng, std=0.5)
        head.key_projection.weight.data[:] = 0.0
        dictionary = _dictionary(rng, 4)
        pooled = (dictionary.priors[:, None] * dictionary.features).sum(axis=0) / 4
        expected = pooled @ head.classifier.weight.data + head.classifier.bias.data
        logits = head.logits(None, Tensor(rng.standard_normal((1, 8))), dictionary).numpy()[0]
        assert np.allclose(logits, expected, atol=1e-12)

    def test_zero_wc_uniform_loss(self, rng):
        """Debe valer log |espacio objetivo| con W_c nula."""
        head = _head(Design.A, rng)
        head.classifier.weight.data[:] = 0.0
        scope = InterventionScope(ScopeMode.VISION_INTRA, "vision", 12, 5)
        target = np.zeros(5)
        target[3] = 1.0
        ref = TokenRef(Modality.VISION, 1)
        sample = XYSample(Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((1, 8))), ref, ref)
        term = intervention_loss([sample], _dictionary(rng, 4), head, [(target, ("vision", 3))], scope)
        assert abs(term.value.item() - math.log(5)) < 1e-12

    def test_empty_selection(self, rng):
        """Debe dar una pérdida vacía sin muestras."""
        scope = InterventionScope(ScopeMode.VISION_INTRA, "vision", 12, 5)
        term = intervention_loss([], _dictionary(rng), _head(Design.A, rng), [], scope)
        assert term.is_empty and term.value.item() == 0.0

    def test_x_required_iff_not_d(self, rng):
        """Debe exigir x en A/B/C y rechazarlo en D."""
        with pytest.raises(ValidationError):
            _head(Design.D, rng).logits(Tensor(np.ones((1, 8))), Tensor(np.ones((1, 8))), _dictionary(rng))
        with pytest.raises(ValidationError):
            _head(Design.B, rng).logits(None, Tensor(np.ones((1, 8))), _dictionary(rng))

    def test_ratio_gradient(self, rng):
        """Debe pasar el chequeo de gradiente por alpha, pooling y W_c (modo ratio)."""
        head = _head(Design.C, rng, std=0.5)
        head.query_projection.weight.data = np.abs(head.query_projection.weight.data)
        head.key_projection.weight.data = np.abs(head.key_projection.weight.data)
        dictionary = ConfounderDictionary(Modality.VISION, [0, 1, 2], rng.random((3, 6)) + 0.5, np.array([0.2, 0.3, 0.5]))
        target = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
        x = Tensor(rng.standard_normal((1, 8)), requires_grad=True)
        y = Tensor(rng.random((1, 8)) + 0.5, requires_grad=True)
        scope = InterventionScope(ScopeMode.VISION_INTRA, "vision", 12, 5)
        ref = TokenRef(Modality.VISION, 1)

        def loss(*_):
            return intervention_loss([XYSample(x, y, ref, ref)], dictionary, head, [(target, ("vision", 1))], scope).value

        inputs = [x, y, head.query_projection.weight, head.key_projection.weight, head.classifier.weight]
        assert gradient_check(loss, inputs).ok(1e-4)


class TestDesignSelection:
    """Tests para la selección de X/Y por diseño."""

    def test_design_a_sources(self, rng):
        """Debe tomar x de la pasada enmascarada e y de la limpia en la misma posición."""
        masked, clean = _fake_output(rng, 3, 4), _fake_output(rng, 3, 4)
        ref = TokenRef(Modality.VISION, 2)
        samples = select_xy_design_A(masked, clean, [ref])
        assert len(samples) == 1
        assert np.array_equal(samples[0].x.numpy(), masked.vis_final.numpy()[2:3])
        assert np.array_equal(samples[0].y.numpy(), clean.vis_final.numpy()[2:3])
        assert not samples[0].y.requires_grad

    def test_design_a_empty(self, rng):
        """Debe devolver una lista vacía sin posiciones enmascaradas."""
        assert select_xy_design_A(_fake_output(rng, 3, 4), _fake_output(rng, 3, 4), []) == []

    def test_design_b_cartesian(self, rng):
        """Debe producir 6 pares con N_u=3 y N_m=2."""
        out = _fake_output(rng, 3, 6)
        masked = [TokenRef(Modality.VISION, p) for p in (1, 2)]
        unmasked = [TokenRef(Modality.VISION, p) for p in (3, 4, 5)]
        assert len(select_xy_design_B(out, masked, unmasked)) == 6
        assert select_xy_design_B(out, [], unmasked) == []
        assert select_xy_design_B(out, masked, []) == []

    def test_design_d_one_per_unmasked(self, rng):
        """Debe producir una muestra r por token sin máscara."""
        out = _fake_output(rng, 3, 6)
        refs = [TokenRef(Modality.VISION, p) for p in range(1, 6)]
        samples = select_r_design_D(out, refs)
        assert len(samples) == 5 and all(isinstance(s, RSample) for s in samples)
        assert select_r_design_D(out, []) == []

    @pytest.mark.parametrize("design", ["A", "B", "C", "D"])
    def test_invocation_counts(self, design):
        """Debe invocar la cabeza N_m / N_u*N_m / N_u*N_m / N_u veces en 1.000 máscaras aleatorias."""
        rng = np.random.default_rng(2024)
        registry = DictionaryRegistry()
        registry.publish({"vision": _dictionary(rng, 5)})
        design = Design(design)
        scope = InterventionScope(ScopeMode.VISION_INTRA, "vision", 12, 5)
        head = _head(design, rng)
        objective = InterventionObjective(design, scope, head, registry)
        tokens = TokenSequence(ids=[CLS_ID, 3, 4])
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            states = [MaskState.MASKED_TO_MASK if rng.random() < 0.4 else MaskState.UNMASKED for _ in range(n)]
            regions = _regions(rng, n, states=states)
            n_m = sum(1 for s in states if s.is_masked)
            n_u = n - n_m
            before = head.invocations
            clean = _fake_output(rng, 3, n + 1) if design.needs_clean_pass else None
            objective.compute(_fake_output(rng, 3, n + 1), clean, tokens, regions)
            expected = {"A": n_m, "B": n_u * n_m, "C": n_u * n_m, "D": n_u}[design.value]
            assert head.invocations - before == expected


class TestObjectives:
    """Tests de objetivos completos sobre el modelo."""

    @pytest.fixture
    def setup(self, tiny_config):
        rng = np.random.default_rng(5)
        store = ParameterStore()
        model = TwoStreamBert(tiny_config, store, rng)
        heads = PretrainingHeads(store, tiny_config, rng)
        region_pool = [_regions(rng, 3) for _ in range(6)]
        registry = DictionaryRegistry()
        registry.publish({"vision": build_vision_dictionary(region_pool, min_count=1)})
        tokens = TokenSequence(ids=[CLS_ID, 3, 4, 5], is_noun=[False, True, False, True])
        return model, heads, store, registry, tokens, region_pool, rng

    @pytest.mark.parametrize("design,passes", [("A", 2), ("B", 1), ("C", 2), ("D", 1)])
    def test_encoder_passes(self, setup, tiny_config, design, passes):
        """Debe hacer 2 pasadas del encoder en A y C y 1 en B y D."""
        model, heads, store, registry, tokens, region_pool, rng = setup
        objective = build_objective(store, design, "vision_intra", registry, 8, 8,
                                    tiny_config.vocab_size, tiny_config.num_object_classes, rng, d_bilinear=4)
        batch = build_batch([(tokens, region_pool[0])], [0], MaskingPolicy(vis_mask_rate=0.5), rng,
                            tiny_config.vocab_size, negative_rate=0.0)
        report = training_step(batch, model, heads, {"mlm": 1.0, "mom": 1.0}, Adam(store.parameters()), [objective])
        assert report.encoder_passes == passes
        assert objective.name in report.losses

    @pytest.mark.parametrize("design,mom_counted", [("A", False), ("B", False), ("C", True), ("D", True)])
    def test_mtm_replacement(self, setup, tiny_config, design, mom_counted):
        """Debe excluir del MOM las regiones intervenidas en A/B y conservarlas en C/D."""
        model, heads, store, registry, tokens, region_pool, rng = setup
        objective = build_objective(store, design, "vision_intra", registry, 8, 8,
                                    tiny_config.vocab_size, tiny_config.num_object_classes, rng, d_bilinear=4)
        policy = MaskingPolicy(vis_mask_rate=1.0, vis_keep_original_rate=0.0, lang_mask_rate=0.0)
        batch = build_batch([(tokens, region_pool[0])], [0], policy, rng, tiny_config.vocab_size, negative_rate=0.0)
        report = training_step(batch, model, heads, {"mom": 1.0}, Adam(store.parameters()), [objective])
        assert (report.counts["mom"] > 0) == mom_counted

    def test_end_to_end_gradient(self, setup, tiny_config):
        """Debe pasar el chequeo de gradiente a través de la cabeza y el encoder."""
        model, heads, store, registry, tokens, region_pool, rng = setup
        objective = build_objective(store, "B", "vision_intra", registry, 8, 8, tiny_config.vocab_size,
                                    tiny_config.num_object_classes, rng, d_bilinear=4, std=0.5, alpha_mode="softmax")
        regions = _regions(rng, 3, states=[MaskState.MASKED_TO_MASK, MaskState.UNMASKED, MaskState.UNMASKED])

        def loss(*_):
            term, _ = objective.compute(model(tokens, regions), None, tokens, regions)
            return term.value

        head = objective.head
        inputs = [head.query_projection.weight, head.classifier.weight, store["vis.embed.feature.weight"]]
        assert gradient_check(loss, inputs).ok(1e-4)

    def test_inter_modal_pairs(self, setup, tiny_config):
        """Debe emparejar solo modalidades distintas contra el diccionario conjunto."""
        model, heads, store, registry, tokens, region_pool, rng = setup
        registry.publish({
            "language": _dictionary(rng, 2, 8, Modality.LANGUAGE, [3, 5]),
            "joint": build_joint_dictionary(_dictionary(rng, 2, 8, Modality.LANGUAGE, [3, 5]), registry.get("vision")),
        })
        objective = build_objective(store, "B", "inter_modal", registry, 8, 8, tiny_config.vocab_size,
                                    tiny_config.num_object_classes, rng, d_bilinear=4)
        assert objective.head.target_size == tiny_config.vocab_size + tiny_config.num_object_classes
        masked_tokens = TokenSequence(ids=tokens.ids, is_noun=tokens.is_noun,
                                      mask_states=[MaskState.UNMASKED, MaskState.MASKED_TO_MASK,
                                                   MaskState.UNMASKED, MaskState.UNMASKED])
        regions = _regions(rng, 3, states=[MaskState.MASKED_TO_MASK, MaskState.UNMASKED, MaskState.UNMASKED])
        before = objective.head.invocations
        term, replaced = objective.compute(model(masked_tokens, regions), None, masked_tokens, regions)
        # 1 sustantivo enmascarado x 2 regiones + 1 region enmascarada x 1 sustantivo
        assert objective.head.invocations - before == 3
        assert term.count == 3
        assert {r.modality for r in replaced} == {Modality.LANGUAGE, Modality.VISION}
