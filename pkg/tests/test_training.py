"""Training tests: loss builders, batching arithmetic, optimizer behavior,
mode differences, determinism."""

import warnings

import numpy as np
import pytest

from aspectgrad import autodiff as ad
from aspectgrad.attribution import attribution_graph, saliency
from aspectgrad.data import Corpus, Example, build_vocabulary, generate_synthetic, SyntheticSpec
from aspectgrad.model import (
    ModelConfig,
    PARAMETER_NAMES,
    forward,
    init_params,
    nll_from_logits,
)
from aspectgrad.training import (
    AdamOptimizer,
    TrainConfig,
    classification_loss,
    correction_loss,
    example_losses,
    total_loss,
    train,
    _batch_step,
    _encode_examples,
)


def micro_example(mask=(0, 1)):
    return Example(id="m", tokens=["screen", "great"], aspect_span=(0, 1),
                   polarity="POS", opinion_mask=list(mask), annotated=True).validate()


def micro_setup(seed=11, mask=(0, 1)):
    ex = micro_example(mask)
    vocab = build_vocabulary([ex])
    params = init_params(ModelConfig(vocab_size=len(vocab), embed_dim=3,
                                     hidden_dim=2, init_seed=seed))
    return ex, vocab, params


def objective_gradient(ex, vocab, params, weight, mode):
    """Flattened d(l_c + weight*l_g)/d(theta) for one example."""
    config = TrainConfig(gradient_weight=weight, correction_mode=mode)
    enc = _encode_examples([ex], vocab)[0]
    trace, l_c, l_g = example_losses(enc, params, config)
    total = total_loss(l_c, l_g, weight)
    wrt = [trace.parameter_nodes[n] for n in PARAMETER_NAMES]
    return np.concatenate([g.ravel() for g in ad.grad(total, wrt)])


def objective_value(ex, vocab, params, weight, frozen_gradients=None):
    """The combined objective as a plain function of the parameters.

    With ``frozen_gradients`` the attribution is built from the provided
    input-gradient arrays (the detached objective); otherwise gradients are
    recomputed at the given parameters (the full second-order objective).
    """
    from aspectgrad.data import encode_tokens

    ids = encode_tokens(ex.tokens, vocab)
    gold = {"POS": 0, "NEG": 1, "NEU": 2}[ex.polarity]
    trace = forward(ids, ex.aspect_span, params, ad.Tape())
    l_c = float(nll_from_logits(trace.logits, gold).value)
    if frozen_gradients is None:
        _, _, _, alpha = attribution_graph(trace, gold, mode="values")
    else:
        xs = [n.value for n in trace.input_embedding_nodes]
        scores = np.array([abs(float(np.dot(g, x)))
                           for g, x in zip(frozen_gradients, xs)])
        total = scores.sum()
        alpha = scores / total if total > 0 else np.full(len(scores), 1 / len(scores))
    l_g = -float(np.dot(alpha, np.array(ex.opinion_mask, dtype=float)))
    return l_c + weight * l_g


class TestLossBuilders:
    def test_total_loss_arithmetic(self):
        t = ad.Tape()
        l_c = t.constant(1.0)
        l_g = t.constant(-0.5)
        assert float(total_loss(l_c, l_g, 0.01).value) == pytest.approx(0.995, abs=1e-15)

    def test_total_loss_with_zero_weight_is_classification(self):
        t = ad.Tape()
        l_c = t.constant(0.7)
        assert float(total_loss(l_c, None, 0.0).value) == 0.7

    def test_default_weight_is_one_percent(self):
        assert TrainConfig().gradient_weight == 0.01

    def test_correction_loss_direct_substitution(self):
        t = ad.Tape()
        alpha = t.variable(np.array([0.75, 0.25]))

        class Holder:
            alpha_node = alpha

        assert float(correction_loss(Holder(), [0, 1]).value) == pytest.approx(-0.25)

    def test_correction_loss_full_mask_is_minus_one(self, ):
        ex, vocab, params = micro_setup(mask=(1, 1))
        m = saliency(ex, params, vocab, label="POS", create_graph=True)
        assert float(correction_loss(m, [1, 1]).value) == pytest.approx(-1.0, abs=1e-12)

    def test_correction_loss_empty_mask_is_zero(self):
        ex, vocab, params = micro_setup()
        m = saliency(ex, params, vocab, label="POS", create_graph=True)
        assert float(correction_loss(m, [0, 0]).value) == 0.0

    def test_correction_loss_mask_length_mismatch(self):
        ex, vocab, params = micro_setup()
        m = saliency(ex, params, vocab, label="POS", create_graph=True)
        with pytest.raises(ValueError):
            correction_loss(m, [1, 0, 1])

    def test_correction_loss_requires_graph(self):
        ex, vocab, params = micro_setup()
        m = saliency(ex, params, vocab, label="POS")
        with pytest.raises(ValueError):
            correction_loss(m, [0, 1])

    def test_correction_loss_stays_in_unit_interval(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            ex, vocab, params = micro_setup(seed=trial)
            mask = [int(rng.integers(2)), int(rng.integers(2))]
            m = saliency(ex, params, vocab, label="POS", create_graph=True)
            v = float(correction_loss(m, mask).value)
            assert -1.0 - 1e-12 <= v <= 0.0

    def test_classification_loss_uniform_logits(self):
        ex, vocab, params = micro_setup()
        params.arrays["output_weight"][:] = 0.0
        params.arrays["output_bias"][:] = 0.0
        enc = _encode_examples([ex], vocab)[0]
        trace = forward(enc.ids, enc.span, params, ad.Tape())
        assert float(classification_loss(trace, "NEU").value) == pytest.approx(
            np.log(3.0), abs=1e-12)


class TestGradientModes:
    def test_second_order_matches_finite_differences(self):
        ex, vocab, params = micro_setup(seed=7)
        weight = 0.5
        analytic = objective_gradient(ex, vocab, params, weight, "second_order")
        vec = params.to_vector()
        step = 1e-5
        numeric = np.zeros_like(vec)
        for i in range(len(vec)):
            up, dn = vec.copy(), vec.copy()
            up[i] += step
            dn[i] -= step
            numeric[i] = (objective_value(ex, vocab, params.replace_from_vector(up), weight)
                          - objective_value(ex, vocab, params.replace_from_vector(dn), weight)
                          ) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4

    def test_detached_matches_finite_differences_of_frozen_objective(self):
        from aspectgrad.data import encode_tokens

        ex, vocab, params = micro_setup(seed=7)
        weight = 0.5
        ids = encode_tokens(ex.tokens, vocab)
        trace = forward(ids, ex.aspect_span, params, ad.Tape())
        frozen = ad.grad(nll_from_logits(trace.logits, 0), trace.input_embedding_nodes)

        analytic = objective_gradient(ex, vocab, params, weight, "detached")
        vec = params.to_vector()
        step = 1e-5
        numeric = np.zeros_like(vec)
        for i in range(len(vec)):
            up, dn = vec.copy(), vec.copy()
            up[i] += step
            dn[i] -= step
            numeric[i] = (objective_value(ex, vocab, params.replace_from_vector(up),
                                          weight, frozen_gradients=frozen)
                          - objective_value(ex, vocab, params.replace_from_vector(dn),
                                            weight, frozen_gradients=frozen)
                          ) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4

    def test_modes_differ_measurably(self):
        ex, vocab, params = micro_setup(seed=11)
        a = objective_gradient(ex, vocab, params, 0.5, "second_order")
        b = objective_gradient(ex, vocab, params, 0.5, "detached")
        ratio = np.linalg.norm(b) / np.linalg.norm(a)
        assert not 0.99 <= ratio <= 1.01

    def test_all_ones_mask_gives_constant_correction_loss(self):
        """Attribution sums to one identically, so the correction gradient
        cancels to round-off."""
        ex, vocab, params = micro_setup(mask=(1, 1))
        config = TrainConfig(gradient_weight=1.0, correction_mode="second_order")
        enc = _encode_examples([ex], vocab)[0]
        trace, l_c, l_g = example_losses(enc, params, config)
        assert float(l_g.value) == pytest.approx(-1.0, abs=1e-12)
        wrt = [trace.parameter_nodes[n] for n in PARAMETER_NAMES]
        grads = ad.grad(l_g, wrt)
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        assert norm < 1e-8


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        opt = AdamOptimizer(learning_rate=0.1)
        arrays = {"w": np.array([1.0, -2.0, 3.0])}
        out = opt.step(arrays, {"w": np.zeros(3)})
        np.testing.assert_array_equal(out["w"], arrays["w"])

    def test_step_direction_opposes_gradient(self):
        opt = AdamOptimizer(learning_rate=0.1)
        arrays = {"w": np.zeros(3)}
        out = opt.step(arrays, {"w": np.array([1.0, -1.0, 2.0])})
        assert np.all(np.sign(out["w"]) == [-1.0, 1.0, -1.0])

    def test_updates_are_functional(self):
        opt = AdamOptimizer(learning_rate=0.1)
        arrays = {"w": np.ones(2)}
        out = opt.step(arrays, {"w": np.ones(2)})
        assert out["w"] is not arrays["w"]
        np.testing.assert_array_equal(arrays["w"], np.ones(2))


def small_corpus(n_train=24, n_valid=12, seed=0):
    return generate_synthetic(SyntheticSpec(n_train=n_train, n_valid=n_valid,
                                            n_test=12, seed=seed))


def model_config_for(corpus, seed=0):
    return ModelConfig(vocab_size=len(corpus.vocabulary), embed_dim=8,
                       hidden_dim=8, init_seed=seed)


class TestBatchStep:
    def test_loss_breakdown_matches_scalar_recomputation(self):
        corpus = small_corpus()
        config = TrainConfig(gradient_weight=0.01, batch_size=8, epochs=1, seed=0)
        params = init_params(model_config_for(corpus))
        encoded = _encode_examples(corpus.splits["train"][:8], corpus.vocabulary)
        opt = AdamOptimizer(config.learning_rate)
        _, breakdown, _ = _batch_step(encoded, params, opt, config)

        lc_values = []
        lg_values = []
        for enc in encoded:
            trace, l_c, l_g = example_losses(enc, params, config)
            lc_values.append(float(l_c.value))
            if l_g is not None:
                lg_values.append(float(l_g.value))
        assert breakdown.classification == pytest.approx(np.mean(lc_values), abs=1e-12)
        assert breakdown.correction == pytest.approx(np.mean(lg_values), abs=1e-12)
        assert breakdown.total == pytest.approx(
            breakdown.classification + 0.01 * breakdown.correction, abs=1e-12)


class TestTrain:
    def test_zero_weight_run_ignores_annotations(self):
        corpus = small_corpus()
        hidden = Corpus(
            splits={"train": [ex for ex in corpus.splits["train"]],
                    "valid": corpus.splits["valid"]},
            vocabulary=corpus.vocabulary)
        config = TrainConfig(gradient_weight=0.0, epochs=2, seed=3, batch_size=8)
        p1, h1 = train(corpus, config, model_config_for(corpus, seed=3))
        # same run with every annotation hidden
        from dataclasses import replace
        hidden.splits["train"] = [replace(ex, annotated=False)
                                  for ex in hidden.splits["train"]]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p2, h2 = train(hidden, config, model_config_for(corpus, seed=3))
        for name in p1.arrays:
            np.testing.assert_array_equal(p1.arrays[name], p2.arrays[name])
        assert h1.to_csv() == h2.to_csv()

    def test_unannotated_corpus_with_positive_weight_warns(self):
        from dataclasses import replace

        corpus = small_corpus()
        corpus.splits["train"] = [replace(ex, annotated=False)
                                  for ex in corpus.splits["train"]]
        config = TrainConfig(gradient_weight=0.01, epochs=1, batch_size=8)
        with pytest.warns(UserWarning):
            train(corpus, config, model_config_for(corpus))

    def test_determinism(self):
        corpus = small_corpus()
        config = TrainConfig(gradient_weight=0.01, epochs=2, seed=5, batch_size=8)
        p1, h1 = train(corpus, config, model_config_for(corpus, seed=5))
        p2, h2 = train(corpus, config, model_config_for(corpus, seed=5))
        for name in p1.arrays:
            np.testing.assert_array_equal(p1.arrays[name], p2.arrays[name])
        assert h1.to_csv() == h2.to_csv()

    def test_history_has_one_entry_per_epoch(self):
        corpus = small_corpus()
        config = TrainConfig(epochs=3, batch_size=8, gradient_weight=0.01)
        _, history = train(corpus, config, model_config_for(corpus))
        assert [e.epoch for e in history.entries] == [1, 2, 3]

    def test_empty_corpus_rejected(self):
        corpus = small_corpus()
        empty = Corpus(splits={"train": []}, vocabulary=corpus.vocabulary)
        with pytest.raises(ValueError):
            train(empty, TrainConfig(epochs=1), model_config_for(corpus))

    def test_vocabulary_mismatch_rejected(self):
        corpus = small_corpus()
        bad = ModelConfig(vocab_size=3, embed_dim=4, hidden_dim=4)
        with pytest.raises(ValueError):
            train(corpus, TrainConfig(epochs=1), bad)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(gradient_weight=-0.1).validate()
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(annotated_fraction=1.5).validate()
        with pytest.raises(ValueError):
            TrainConfig(correction_mode="other").validate()
