import numpy as np
import pytest
from numpy.testing import assert_allclose

from cells import RgcState, RgcWeights, rgc_factors
from jepa import RGC_KEYS, encode_sequence
from oracles import (GradientReport, as_block_dict, bptt_grad, check_rgc_jacobian, finite_diff_grad,
                     full_rtrl_grad, model_finite_diff, rel_error, rtrl_slice, time_decay_bptt_grad,
                     time_decay_loss, time_decay_rfp_grad)
from rfp import RfpRun, rfp_init
from trainer import rfp_sequence_grad
from utils.errors import CapacityError, ShapeError, ValidationError


def test_finite_diff_scalar_and_array():
    assert finite_diff_grad(lambda w: w * w, 3.0) == pytest.approx(6.0, rel=1e-8)
    grad = finite_diff_grad(lambda w: float(np.sum(w ** 3)), np.array([1.0, -2.0]))
    assert_allclose(grad, [3.0, 12.0], rtol=1e-8)
    with pytest.raises(ValidationError):
        finite_diff_grad(lambda w: w, 1.0, eps=0.0)


def test_finite_diff_with_sequence():
    grad = finite_diff_grad(lambda p, seq: float(p["a"] @ seq), {"a": np.zeros(3)}, sequence=np.arange(3.0))
    assert_allclose(grad["a"], [0.0, 1.0, 2.0], atol=1e-9)


def test_rel_error_shape_and_values():
    assert rel_error(np.ones(3), np.ones(3)) == 0.0
    assert rel_error(np.zeros(2), np.zeros(2)) == 0.0
    with pytest.raises(ShapeError):
        rel_error(np.ones(2), np.ones(3))


def test_dense_jacobian_matches_finite_difference(rng):
    w = RgcWeights.random(5, rng.generator, 0.8)
    state = RgcState(rng.normal(5), rng.normal(5))
    assert check_rgc_jacobian(w, state, rng.normal(5)) < 1e-7


def test_rfp_matches_bptt_and_finite_difference(make_model, patches):
    model = make_model(n=4, seed=3, stop_gradient=False)
    seq = patches(T=7, seed=3)
    rfp = rfp_sequence_grad(model, seq)
    bptt = bptt_grad(model, seq)
    fd = model_finite_diff(model, seq)
    for key in model.params():
        assert rel_error(rfp.grads[key], bptt.grads[key]) < 1e-10, key
        assert rel_error(bptt.grads[key], fd[key]) < 1e-6, key
    assert rfp.value == pytest.approx(bptt.value)


@pytest.mark.parametrize("psi", ["final", "linear"])
def test_rfp_matches_bptt_for_other_aggregations(make_model, patches, psi):
    model = make_model(n=3, seed=5)
    seq = patches(T=6, seed=5)
    rfp = rfp_sequence_grad(model, seq, psi)
    bptt = bptt_grad(model, seq, psi)
    for key in RGC_KEYS:
        assert rel_error(rfp.grads[key], bptt.grads[key]) < 1e-10


def test_stop_gradient_changes_embed_gradient(make_model, patches):
    seq = patches(T=6, seed=1)
    with_sg = bptt_grad(make_model(n=3, seed=1, stop_gradient=True), seq)
    without = bptt_grad(make_model(n=3, seed=1, stop_gradient=False), seq)
    assert rel_error(with_sg.grads["embed"], without.grads["embed"]) > 1e-6
    assert with_sg.value == pytest.approx(without.value)


def test_dense_gates_bptt_matches_finite_difference(make_model, patches):
    model = make_model(n=3, seed=2, diagonal_gates=False, stop_gradient=False)
    seq = patches(T=6, seed=2)
    bptt = bptt_grad(model, seq)
    fd = model_finite_diff(model, seq, keys=RGC_KEYS)
    for key in RGC_KEYS:
        assert rel_error(bptt.grads[key], fd[key]) < 1e-6


def test_mlp_predictor_bptt_matches_finite_difference(make_model, patches):
    model = make_model(n=3, seed=4, predictor="mlp", stop_gradient=False)
    seq = patches(T=5, seed=4)
    bptt = bptt_grad(model, seq)
    fd = model_finite_diff(model, seq)
    for key in ("W_in", "W_out", "W0"):
        assert rel_error(bptt.grads[key], fd[key]) < 1e-6


def test_full_rtrl_slice_equals_folded_sensitivity(make_model, patches):
    model = make_model(n=3, seed=6)
    seq = patches(T=6, seed=6)
    rtrl = full_rtrl_grad(model, seq, keep_history=True)

    enc = encode_sequence(model, seq)
    run = RfpRun(rfp_init(model.n))
    for t in range(1, enc.T + 1):
        prev = RgcState(enc.s[t - 1], enc.m[t - 1])
        run.advance(rgc_factors(prev, enc.x[t - 1], model.rgc, t, enc.caches[t - 1]))
        assert np.max(np.abs(rtrl_slice(rtrl.extras["history"][t - 1]) - run.sens.gamma)) < 1e-12
    assert rtrl.extras["max_off_slice"] < 1e-14
    assert rtrl.memory_reals == 8 * model.n ** 3

    bptt = bptt_grad(model, seq)
    for key in RGC_KEYS:
        assert rel_error(rtrl.grads[key], bptt.grads[key]) < 1e-10


def test_full_rtrl_dense_gates_leave_the_slice(make_model, patches):
    model = make_model(n=3, seed=7, diagonal_gates=False)
    rtrl = full_rtrl_grad(model, patches(T=6, seed=7))
    assert rtrl.extras["max_off_slice"] > 1e-8


def test_full_rtrl_capacity_limit(make_model, patches):
    model = make_model(n=65, seed=0)
    with pytest.raises(CapacityError):
        full_rtrl_grad(model, patches(T=3))


def test_time_decay_forward_gradient(rng):
    p_map = rng.normal((3, 2))
    inputs = rng.normal((8, 2))
    targets = rng.normal((8, 3))
    fd = finite_diff_grad(lambda p: time_decay_loss(0.6, p, inputs, targets), p_map)
    forward = time_decay_rfp_grad(0.6, p_map, inputs, targets)
    assert_allclose(forward, time_decay_bptt_grad(0.6, p_map, inputs, targets), rtol=1e-10, atol=1e-12)
    assert rel_error(forward, fd) < 1e-7


def test_gradient_report_summaries():
    report = GradientReport()
    a = {"W0": np.ones((2, 2)), "W1": np.zeros((2, 2))}
    b = {"W0": np.ones((2, 2)) * 1.1, "W1": np.zeros((2, 2)), "extra": np.ones(1)}
    report.compare("rfp", a, "bptt", b, n=2, T=5, seed=0)
    df = report.to_dataframe()
    assert set(df["block"]) == {"W0", "W1"}
    assert report.max_error("rfp", "bptt") == pytest.approx(rel_error(a["W0"], b["W0"]))
    report.record_method("rfp", 1.5, 32)
    assert list(report.method_dataframe()["memory_reals"]) == [32]


def test_as_block_dict_shape():
    assert set(as_block_dict(np.zeros((4, 2, 2)))) == set(RGC_KEYS)
    with pytest.raises(ShapeError):
        as_block_dict(np.zeros((3, 2, 2)))
