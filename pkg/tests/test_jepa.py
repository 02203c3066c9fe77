from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from jepa import (LinearPredictor, LossAggregator, balance_residual, build_model, encode_sequence,
                  jepa_loss, jepa_loss_grads, load_checkpoint, make_aggregator, make_featurizer, make_testbed,
                  model_loss, pooling_featurizer, predict_next, principal_featurizer, rollout_testbed,
                  save_checkpoint, scaled_h_matrix, sequence_losses, testbed_closed_form_grads, testbed_loss,
                  testbed_moments, y_proxy)
from numerics import Rng
from oracles import finite_diff_grad
from utils.errors import FormatError, NumericError, ShapeError, ValidationError


def test_squared_loss_example():
    loss, d_pred = jepa_loss([1.0, 0.0], [0.0, 0.0])
    assert loss == pytest.approx(0.5)
    assert_allclose(d_pred, [-1.0, 0.0])


def test_squared_loss_lambda_scaling():
    loss, d_pred, d_target = jepa_loss_grads([2.0, 1.0], [1.0, 1.0], lambda1=3.0)
    assert loss == pytest.approx(1.5)
    assert_allclose(d_pred, [-3.0, 0.0])
    assert_allclose(d_target, [3.0, 0.0])


def test_cosine_loss_is_scale_invariant(rng):
    h = rng.normal(4)
    pred = rng.normal(4)
    loss_a, _ = jepa_loss(h, pred, "cosine")
    loss_b, _ = jepa_loss(h, 3.0 * pred, "cosine")
    assert loss_a == pytest.approx(loss_b)
    assert jepa_loss(h, 2.0 * h, "cosine")[0] == pytest.approx(0.0, abs=1e-12)


def test_cosine_gradients_match_finite_difference(rng):
    h = rng.normal(3)
    pred = rng.normal(3)
    _, d_pred, d_target = jepa_loss_grads(h, pred, "cosine", lambda1=2.0)
    fd_pred = finite_diff_grad(lambda p: jepa_loss_grads(h, p, "cosine", 2.0)[0], pred)
    fd_target = finite_diff_grad(lambda t: jepa_loss_grads(t, pred, "cosine", 2.0)[0], h)
    assert_allclose(d_pred, fd_pred, atol=1e-8)
    assert_allclose(d_target, fd_target, atol=1e-8)


def test_loss_errors():
    with pytest.raises(NumericError):
        jepa_loss([0.0, 0.0], [1.0, 0.0], "cosine")
    with pytest.raises(ShapeError):
        jepa_loss([1.0, 0.0], [1.0])
    with pytest.raises(ValidationError):
        jepa_loss([1.0], [1.0], "hinge")


def test_default_model_predicts_identity(rng):
    model = build_model(4, 4, 6, rng.generator)
    h = rng.normal(4)
    assert_allclose(predict_next(model, h), h)


def test_mlp_predictor_starts_near_identity(rng):
    model = build_model(4, 4, 6, rng.generator, predictor="mlp", mlp_init_scale=0.001)
    h = rng.normal(4)
    assert_allclose(predict_next(model, h), h, atol=1e-3)


def test_build_model_validation(rng):
    with pytest.raises(ValidationError):
        build_model(4, 3, 6, rng.generator, embed_init="identity")
    with pytest.raises(ValidationError):
        build_model(4, 4, 6, rng.generator, predictor="rnn")


def test_zero_rgc_encodes_features_directly(rng):
    model = build_model(3, 3, 5, rng.generator, embed_init="random")
    seq = rng.normal((6, 5))
    enc = encode_sequence(model, seq)
    assert enc.T == 6
    assert_allclose(enc.h, model.featurize(seq) @ model.embed.T)
    assert_allclose(enc.s[0], 0.0)


def test_encode_truncation(rng):
    model = build_model(3, 3, 5, rng.generator)
    seq = rng.normal((6, 5))
    assert encode_sequence(model, seq, T=4).T == 4
    with pytest.raises(ShapeError):
        encode_sequence(model, seq, T=7)


def test_sequence_losses_and_aggregation(make_model, patches):
    model = make_model(n=3, seed=2)
    seq = patches(T=6, seed=2)
    losses = sequence_losses(model, seq)
    assert losses.shape == (5,)
    assert model_loss(model, seq) == pytest.approx(losses.mean())
    assert model_loss(model, seq, "final") == pytest.approx(losses[-1])
    assert model_loss(model, seq, "linear") == pytest.approx(float(np.arange(1, 6) @ losses))


def test_custom_aggregator():
    agg = make_aggregator((lambda t, l: l * l, lambda t, l: 2 * l))
    assert agg.value([1.0, 2.0]) == pytest.approx(5.0)
    assert_allclose(agg.weights([1.0, 2.0]), [2.0, 4.0])
    assert make_aggregator(agg) is agg
    with pytest.raises(ValidationError):
        LossAggregator("median")
    with pytest.raises(ValidationError):
        LossAggregator(psi=lambda t, l: l)


def test_checkpoint_round_trip(tmp_path, make_model, patches):
    model = make_model(n=3, seed=8, predictor="mlp")
    path = str(tmp_path / "model.rjpw")
    save_checkpoint(model, path, extra={"epoch": 2})
    loaded, meta = load_checkpoint(path)
    assert meta["extra"] == {"epoch": 2}
    for key, value in model.params().items():
        assert np.array_equal(loaded.params()[key], value)
    seq = patches(T=5, seed=8)
    assert model_loss(loaded, seq) == model_loss(model, seq)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "broken.rjpw"
    path.write_bytes(b"XXXXX" + b"\x00" * 16)
    with pytest.raises(FormatError) as info:
        load_checkpoint(str(path))
    assert info.value.offset == 0


def test_checkpoint_truncated(tmp_path, make_model):
    path = tmp_path / "model.rjpw"
    save_checkpoint(make_model(n=2), str(path))
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(FormatError):
        load_checkpoint(str(path))


def test_balance_residual_examples():
    h = np.array([[2.0, 0.0], [1.0, 1.0]])
    w = np.linalg.cholesky(h @ h.T).T
    assert balance_residual(w, h, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert balance_residual(np.zeros((2, 2)), h, 1.0) == pytest.approx(1.0)
    assert balance_residual(np.zeros((2, 2)), np.zeros((2, 3)), 1.0) == 0.0


@pytest.fixture
def testbed_setup():
    gen = Rng(21, (5,)).generator
    tb = make_testbed([6, 4, 3], [0.5, 0.3], 2, gen, lambda1=1.5, w_gh_scale=0.3, w_ga_scale=0.3)
    seqs = [gen.normal(0.0, 1.0, (12, 6)) for _ in range(3)]
    return tb, rollout_testbed(tb, seqs)


def test_testbed_rollout_shapes(testbed_setup):
    tb, rollout = testbed_setup
    assert tb.d_h == 3 and tb.d_clow == 4 and tb.d_action == 2
    assert rollout.h[0].shape == (12, 3)
    assert rollout.c_low[0].shape == (12, 4)
    assert rollout.pair_count == 33
    assert_allclose(np.linalg.norm(rollout.c_low[0], axis=1), 1.0)


def test_testbed_closed_form_matches_finite_difference(testbed_setup):
    tb, rollout = testbed_setup
    d_gh, d_ga = testbed_closed_form_grads(tb, testbed_moments(rollout))
    fd_gh = finite_diff_grad(lambda w: testbed_loss(replace(tb, w_gh=w), rollout), tb.w_gh)
    fd_ga = finite_diff_grad(lambda w: testbed_loss(replace(tb, w_ga=w), rollout), tb.w_ga)
    assert_allclose(d_gh, fd_gh, rtol=1e-6, atol=1e-9)
    assert_allclose(d_ga, fd_ga, rtol=1e-6, atol=1e-9)


def test_scaled_h_matrix_reproduces_lag_zero_moment(testbed_setup):
    _, rollout = testbed_setup
    h = scaled_h_matrix(rollout)
    assert_allclose(h @ h.T, testbed_moments(rollout).r0)


def test_y_proxy_vanishes_with_zero_predictor(testbed_setup):
    tb, rollout = testbed_setup
    flat = replace(tb, w_gh=np.zeros((3, 3)))
    assert y_proxy(flat, rollout) == 0.0
    assert y_proxy(tb, rollout) > 0.0


def test_linear_predictor_shape_check():
    with pytest.raises(ShapeError):
        LinearPredictor(np.ones((2, 3)))


def test_pooling_featurizer_is_non_negative_and_orthonormal(rng):
    featurizer = pooling_featurizer(4, 10, rng.generator)
    assert featurizer.shape == (4, 10)
    assert (featurizer >= 0).all()
    assert_allclose(featurizer @ featurizer.T, np.eye(4), atol=1e-12)
    assert ((featurizer > 0).sum(axis=0) == 1).all()
    with pytest.raises(ValidationError):
        pooling_featurizer(11, 10, rng.generator)


def test_principal_featurizer_orders_directions_by_energy(rng):
    samples = rng.normal((2000, 3)) * np.array([0.1, 3.0, 1.0])
    featurizer = principal_featurizer(samples, 2)
    assert_allclose(np.abs(featurizer), [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], atol=0.05)
    assert (featurizer[np.arange(2), np.argmax(np.abs(featurizer), axis=1)] > 0).all()
    with pytest.raises(ValidationError):
        principal_featurizer(samples, 4)


def test_make_featurizer_kinds(rng):
    assert make_featurizer("random", 3, 5, rng.generator).shape == (3, 5)
    with pytest.raises(ValidationError):
        make_featurizer("pca", 3, 5, rng.generator)
    with pytest.raises(ValidationError):
        make_featurizer("sobel", 3, 5, rng.generator)
    patches = rng.normal((4, 6, 5, 1, 1))
    assert make_featurizer("pca", 3, 5, rng.generator, patches).shape == (3, 5)


def test_build_model_accepts_featurizer_matrix(rng):
    matrix = pooling_featurizer(3, 6, rng.generator)
    model = build_model(3, 3, 6, rng.generator, featurizer=matrix)
    assert_allclose(model.featurizer, matrix)
    assert (build_model(3, 3, 6, rng.generator, featurizer="pooling").featurizer >= 0).all()
