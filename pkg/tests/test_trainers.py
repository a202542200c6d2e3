import numpy as np
import pytest

from powermat.core import Hyperparams
from powermat.data import ConfigError, ContextEncoder, Dataset, RatingEvent, synth_generate, synth_planted
from powermat.trainers import (
    RatingAccessError, RatingBlindView, TrainConfig, TrainingDiverged, init_model, predict,
    predict_dataset, train,
)


@pytest.fixture(scope="module")
def small():
    return synth_generate(20, 30, 300, 1.0, (2, 3), seed=1)


def test_init_model_bounds(small):
    m = init_model(small, TrainConfig(hyper=Hyperparams(k=4), init_scale=1.0))
    for F in (m.user_factors, m.item_factors):
        assert F.min() > 0 and F.max() <= 0.5
    dots = m.user_factors @ m.item_factors.T
    assert dots.min() > 0 and dots.max() <= 1.0
    assert np.all(m.alpha == 0) and m.beta == 0.0
    m1 = init_model(small, TrainConfig(hyper=Hyperparams(k=1), init_scale=0.5))
    assert (m1.user_factors @ m1.item_factors.T).max() <= 0.25


def test_init_model_deterministic(small):
    cfg = TrainConfig(init_seed=11)
    a, b = init_model(small, cfg), init_model(small, cfg)
    assert np.array_equal(a.user_factors, b.user_factors)
    assert np.array_equal(a.item_factors, b.item_factors)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(algorithm="dotmat", rating_blind=True)
    with pytest.raises(ConfigError):
        TrainConfig(algorithm="classic_mf", rating_blind=True)


def test_single_event_single_step():
    ev = [RatingEvent("u", "i", 3.0, (1,))]
    ds = Dataset.from_events(ev, ContextEncoder.fit(ev, ["a"]))
    for algo in ("powermat", "dotmat", "classic_mf"):
        _, rep = train(ds, TrainConfig(algo, epochs=1))
        assert rep.steps == 1 and len(rep.loss_trace) == 1


@pytest.mark.parametrize("algo", ["powermat", "dotmat", "classic_mf"])
def test_training_is_deterministic(small, algo):
    cfg = TrainConfig(algo, epochs=3, hyper=Hyperparams(gamma=1e-4 if algo == "powermat" else 0.01))
    a, ra = train(small, cfg)
    b, rb = train(small, cfg)
    assert np.array_equal(a.user_factors, b.user_factors)
    assert np.array_equal(a.item_factors, b.item_factors)
    assert np.array_equal(a.alpha, b.alpha) and a.beta == b.beta
    assert ra.loss_trace == rb.loss_trace


def test_classic_mf_planted_rank1():
    ds, _, _ = synth_planted(12, 12, k=1, seed=0)
    cfg = TrainConfig("classic_mf", epochs=200, hyper=Hyperparams(gamma=0.1, k=1, sigma_u=1e3, sigma_v=1e3))
    model, rep = train(ds, cfg)
    assert np.mean((predict_dataset(model, ds) - ds.ratings) ** 2 / 25.0) <= 1e-3
    assert rep.loss_trace[-1] <= 1e-3
    assert rep.loss_trace[-1] < rep.loss_trace[0]


def test_rating_blind_view_counts_and_blocks(small):
    view = RatingBlindView(small)
    with pytest.raises(RatingAccessError):
        view.ratings
    assert view.rating_reads == 1


def test_rating_blind_training(small):
    cfg = TrainConfig("powermat", epochs=2, rating_blind=True, hyper=Hyperparams(gamma=1e-4))
    model, rep = train(small, cfg)
    assert rep.rating_reads == 0
    assert model.is_finite()


def test_rating_blind_ignores_ratings(small):
    # scrambling every rating must not change a rating-blind run
    scrambled = Dataset.from_events(
        [RatingEvent(e.user_id, e.item_id, 6.0 - e.rating, e.context_attrs) for e in small.events],
        small.encoder)
    cfg = TrainConfig("powermat", epochs=2, rating_blind=True, hyper=Hyperparams(gamma=1e-4))
    a, _ = train(small, cfg)
    b, _ = train(scrambled, cfg)
    assert np.array_equal(a.user_factors, b.user_factors) and a.beta == b.beta


def test_beta_trace_non_increasing(small):
    cfg = TrainConfig("powermat", epochs=3, record_beta=True, hyper=Hyperparams(gamma=1e-4))
    _, rep = train(small, cfg)
    trace = np.array(rep.beta_trace)
    assert len(trace) == rep.steps + 1
    assert np.all(np.diff(trace) <= 0)


def test_divergence_aborts_with_diagnostics(small):
    cfg = TrainConfig("powermat", epochs=50, hyper=Hyperparams(gamma=0.3))
    with pytest.raises(TrainingDiverged) as info:
        train(small, cfg)
    exc = info.value
    assert exc.parameter in {"u", "v", "alpha", "beta", "loss"}
    assert exc.report.overflow_events == 1
    assert f"epoch {exc.epoch}" in str(exc)


def test_loss_trace_length_and_finite(small):
    _, rep = train(small, TrainConfig("dotmat", epochs=4, hyper=Hyperparams(gamma=0.005)))
    assert len(rep.loss_trace) == 4 and np.all(np.isfinite(rep.loss_trace))
    assert set(rep.norms) == {"user_factors", "item_factors", "alpha", "beta"}


def test_predict_known_pair_linear(small):
    model = init_model(small, TrainConfig(hyper=Hyperparams(k=1)))
    model.user_factors[:] = 0.6
    model.item_factors[:] = 1.0
    u, i = small.user_ids[0], small.item_ids[0]
    assert predict(model, u, i, np.zeros(model.d)) == pytest.approx(3.0)
    assert predict(model, u, i, np.zeros(model.d), dataset=small) == pytest.approx(3.0)


def test_predict_cold_start_mean_embedding(small):
    model = init_model(small, TrainConfig(hyper=Hyperparams(k=3)))
    model.user_factors[:] = [0.2, 0.3, 0.1]
    item = small.item_ids[4]
    known = predict(model, small.user_ids[0], item, np.zeros(model.d))
    assert predict(model, "never-seen", item, np.zeros(model.d)) == pytest.approx(known, rel=1e-14)


def test_predict_cold_start_power_rule_uses_context(small):
    cfg = TrainConfig("powermat", epochs=3, rating_blind=True,
                      hyper=Hyperparams(gamma=1e-4, prediction_rule="power"))
    model, _ = train(small, cfg)
    assert np.any(model.alpha != 0)
    enc = small.encoder
    c1, c2 = enc.encode_attrs((1, 1)), enc.encode_attrs((2, 3))
    assert model.alpha @ c1 != model.alpha @ c2
    p1 = predict(model, "new-user", small.item_ids[0], c1)
    p2 = predict(model, "new-user", small.item_ids[0], c2)
    assert np.isfinite(p1) and np.isfinite(p2) and p1 != p2


def test_predict_context_dimension_checked(small):
    model = init_model(small, TrainConfig())
    with pytest.raises(ValueError):
        predict(model, small.user_ids[0], small.item_ids[0], np.zeros(model.d + 1))
