"""Model assembly, the training loop, determinism, and the synthetic corpus."""

import dataclasses

import numpy as np
import pytest

from tefal.config import ConfigError, TrainConfig
from tefal.corpus import synth_corpus
from tefal.linalg import ParamStore, ShapeError
from tefal.model import (
    create_model,
    named_parameters,
    similarity_matrix,
)
from tefal.training import AdamW, TrainingDiverged, clip_global_norm, evaluate, train
from tefal.verify import end_to_end_check


def tiny_config(**overrides):
    base = dict(dim=12, proj_dim=12, frames=3, audio_tokens=4, batch_size=8,
                epochs=3, learning_rate=3e-3, seed=5)
    base.update(overrides)
    return TrainConfig(**base)


def tiny_corpus(seed=9, n=40):
    return synth_corpus(seed=seed, n_items=n, dim=12, frames=3, audio_tokens=4)


class TestModelAssembly:
    def test_projection_width_must_match_text_width(self):
        with pytest.raises(ShapeError, match="widths must match"):
            create_model(seed=0, dim=8, proj_dim=4)

    def test_modality_validated(self):
        with pytest.raises(ValueError, match="modality"):
            create_model(seed=0, dim=8, modality="text")

    def test_blocks_hold_disjoint_parameters(self):
        model = create_model(seed=1, dim=8)
        assert model.video.w_q is not model.audio.w_q
        assert not np.array_equal(model.video.w_q, model.audio.w_q)

    def test_trainable_parameters_per_configuration(self):
        def names(**kw):
            return set(named_parameters(create_model(seed=2, dim=8, **kw)))

        addition = names(fusion="addition")
        assert any(n.startswith("video.") for n in addition)
        assert any(n.startswith("audio.") for n in addition)
        assert "temperature.log_scale" in addition

        video_only = names(modality="video")
        assert not any(n.startswith("audio.") for n in video_only)

        stacking = names(fusion="stacking")
        assert not any(n.startswith("audio.") for n in stacking)
        assert not any(n.startswith("fusion.") for n in stacking)

        late = names(fusion="late")
        assert "fusion.late_w" in late
        assert not any(n.startswith("audio.") for n in late)

        assert "fusion.concat_w" in names(fusion="concat_fc")
        assert any(n.startswith("fusion.xattn.") for n in names(fusion="xattn"))

    def test_checkpointable_set_is_complete(self):
        model = create_model(seed=3, dim=8, modality="video")
        everything = named_parameters(model, trainable_only=False)
        assert any(n.startswith("audio.") for n in everything)


class TestTraining:
    def test_zero_learning_rate_leaves_parameters_bit_identical(self):
        corpus = tiny_corpus()
        config = tiny_config(learning_rate=0.0, epochs=1)
        result = train(config, corpus)
        fresh = create_model(seed=config.seed, dim=config.dim,
                             tau=config.temperature_init)
        for name, param in named_parameters(result.model, trainable_only=False).items():
            np.testing.assert_array_equal(
                param, named_parameters(fresh, trainable_only=False)[name], err_msg=name)

    def test_same_seed_gives_identical_trajectories(self):
        corpus = tiny_corpus()
        r1 = train(tiny_config(), corpus)
        r2 = train(tiny_config(), corpus)
        assert [e["loss"] for e in r1.history] == [e["loss"] for e in r2.history]
        for name, param in named_parameters(r1.model).items():
            np.testing.assert_array_equal(param, named_parameters(r2.model)[name])

    def test_loss_decreases_on_default_corpus(self):
        corpus = tiny_corpus(n=60)
        result = train(tiny_config(epochs=8), corpus)
        assert result.history[-1]["loss"] < 0.5 * result.history[0]["loss"]

    def test_nan_input_aborts_with_diagnostic(self):
        corpus = tiny_corpus()
        corpus.texts[3, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(tiny_config(batch_size=len(corpus)), corpus)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="dim"):
            train(tiny_config(dim=16, proj_dim=16), tiny_corpus())

    def test_batch_larger_than_corpus_rejected(self):
        with pytest.raises(ConfigError, match="batch_size"):
            train(tiny_config(batch_size=999), tiny_corpus())

    def test_stacking_requires_summary_rows(self):
        corpus = tiny_corpus()
        corpus.summary_tokens = None
        with pytest.raises(ConfigError, match="summary"):
            train(tiny_config(fusion="stacking"), corpus)

    def test_gradient_clipping_bounds_global_norm(self):
        store = ParamStore({"w": np.zeros((2, 2))})
        store.accumulate({"w": np.full((2, 2), 10.0)})
        clip_global_norm(store, 1.0)
        assert store.global_grad_norm() <= 1.0 + 1e-12
        # under the bound, gradients pass through untouched
        store.zero_grad()
        store.accumulate({"w": np.full((2, 2), 0.01)})
        clip_global_norm(store, 1.0)
        np.testing.assert_array_equal(store.grad("w"), np.full((2, 2), 0.01))

    def test_zero_gradient_parameter_does_not_move(self):
        store = ParamStore({"w": np.ones((2, 2)), "frozen": np.full((1, 2), 3.0)})
        store.accumulate({"w": np.full((2, 2), 0.5),
                          "frozen": np.zeros((1, 2))})
        AdamW(learning_rate=0.1).step(store)
        np.testing.assert_array_equal(store["frozen"], np.full((1, 2), 3.0))
        assert not np.array_equal(store["w"], np.ones((2, 2)))

    def test_temperature_gradient_vanishes_on_constant_similarity(self):
        from tefal.contrastive import Temperature, infonce
        _, _, d_log = infonce(np.full((4, 4), 0.3), Temperature.from_tau(5.0))
        assert d_log[0, 0] == pytest.approx(0.0, abs=1e-15)


class TestEvaluate:
    def test_untrained_model_is_near_chance(self):
        corpus = synth_corpus(seed=21, n_items=100, dim=12, frames=3, audio_tokens=4)
        model = create_model(seed=6, dim=12)
        result = evaluate(model, corpus)
        assert result.t2v.r1 < 10.0

    def test_single_item_corpus(self):
        corpus = synth_corpus(seed=22, n_items=1, dim=8, frames=2, audio_tokens=2)
        model = create_model(seed=7, dim=8)
        result = evaluate(model, corpus)
        assert result.t2v.r1 == 100.0
        assert result.v2t.r1 == 100.0

    def test_deterministic(self):
        corpus = tiny_corpus()
        model = create_model(seed=8, dim=12)
        a = evaluate(model, corpus)
        b = evaluate(model, corpus)
        np.testing.assert_array_equal(a.ranks_t2v, b.ranks_t2v)
        assert a.t2v == b.t2v

    def test_dsl_incompatible_with_shortlist(self):
        corpus = tiny_corpus()
        model = create_model(seed=9, dim=12)
        with pytest.raises(ValueError, match="dense"):
            evaluate(model, corpus, k=5, dsl_temp=10.0)

    def test_zero_audio_reduces_addition_to_video_only(self):
        corpus = tiny_corpus()
        corpus.audio[...] = 0.0
        model = create_model(seed=10, dim=12, fusion="addition")
        video_view = dataclasses.replace(model, modality="video")
        sim_both = similarity_matrix(model, corpus)
        sim_video = similarity_matrix(video_view, corpus)
        np.testing.assert_array_equal(sim_both, sim_video)


class TestSynthCorpus:
    def test_same_seed_is_bit_identical(self):
        a = synth_corpus(seed=31, n_items=20, dim=8, frames=2, audio_tokens=3)
        b = synth_corpus(seed=31, n_items=20, dim=8, frames=2, audio_tokens=3)
        np.testing.assert_array_equal(a.texts, b.texts)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.audio, b.audio)
        assert a.ids == b.ids

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ValueError):
            synth_corpus(seed=0, n_items=4, audio_informative=1.5)

    def test_uninformative_audio_retrieves_at_chance(self):
        corpus = synth_corpus(seed=32, n_items=80, dim=12, frames=3,
                              audio_tokens=4, audio_informative=0.0, noise=0.3)
        config = tiny_config(modality="audio", epochs=6, seed=2)
        result = train(config, corpus)
        ev = evaluate(result.model, corpus)
        assert ev.t2v.r1 < 15.0  # chance is 1.25%

    def test_fully_informative_audio_retrieves_above_chance(self):
        corpus = synth_corpus(seed=33, n_items=80, dim=12, frames=3,
                              audio_tokens=4, audio_informative=1.0, noise=0.2)
        config = tiny_config(modality="audio", epochs=25, learning_rate=5e-3,
                             seed=2)
        result = train(config, corpus)
        ev = evaluate(result.model, corpus)
        assert ev.t2v.r1 > 25.0  # chance is 1.25%


class TestEndToEndGradient:
    def test_toy_model_matches_finite_differences(self):
        assert end_to_end_check(fusion="addition", seed=1) < 1e-3
