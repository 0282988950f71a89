"""Network substrate: forward/backward correctness, Adam, stable reductions."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offmarl.errors import ConfigError, DataFormatError, DivergenceError
from offmarl.nets import (ADAM_EPS, GradientBundle, MlpNet,
                          clip_bundles_global_norm, logsumexp_stable)


def rand_net(dims, seed):
    return MlpNet.he_uniform(dims, np.random.default_rng(seed))


# -- forward -----------------------------------------------------------------


def test_zero_net_maps_anything_to_zero():
    net = MlpNet.zeros([3, 4, 2])
    out = net.forward([1.0, -2.0, 7.5])
    assert np.array_equal(out, np.zeros(2))


def test_single_linear_layer_is_identity_with_identity_weights():
    net = MlpNet([np.eye(2)], [np.zeros(2)])
    out = net.forward([1.0, -2.0])
    assert np.array_equal(out, [1.0, -2.0])  # output layer is linear


def test_hidden_relu_clips_negative_part():
    # identity first layer feeds a ReLU hidden; second layer passes through
    net = MlpNet([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    out = net.forward([1.0, -2.0])
    assert np.array_equal(out, [1.0, 0.0])


def test_forward_matches_straight_line_arithmetic():
    net = rand_net([4, 6, 5, 3], seed=11)
    x = np.random.default_rng(12).normal(size=4)
    h = x
    for idx, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = np.array([sum(h[i] * w[i, j] for i in range(w.shape[0])) + b[j]
                      for j in range(w.shape[1])])
        h = np.maximum(z, 0.0) if idx < len(net.weights) - 1 else z
    assert np.allclose(net.forward(x), h, rtol=1e-12, atol=1e-12)


def test_forward_rejects_wrong_input_length():
    net = rand_net([3, 4, 2], seed=0)
    with pytest.raises(ConfigError):
        net.forward([1.0, 2.0])


def test_forward_deterministic_for_fixed_parameters():
    net = rand_net([5, 8, 3], seed=5)
    x = np.random.default_rng(6).normal(size=5)
    assert np.array_equal(net.forward(x), net.forward(x))


# -- backward ----------------------------------------------------------------


def test_zero_upstream_gives_zero_bundle():
    net = rand_net([3, 5, 4], seed=2)
    bundle = net.backward(np.ones(3), np.zeros(4))
    assert all(np.all(a == 0) for a in bundle.all_arrays())


def test_linear_layer_weight_gradient_is_the_input():
    # loss = output[0] for a single linear layer: d/dw[j,0] = input[j]
    net = MlpNet.zeros([3, 2])
    x = np.array([0.5, -1.5, 2.0])
    bundle = net.backward(x, np.array([1.0, 0.0]))
    assert np.allclose(bundle.d_weights[0][:, 0], x)
    assert np.allclose(bundle.d_weights[0][:, 1], 0.0)
    assert np.allclose(bundle.d_biases[0], [1.0, 0.0])


def central_difference_check(net, x, upstream, h=1e-5, rtol=1e-4):
    """Every parameter gradient vs central finite differences."""
    def value():
        return float(upstream @ net.forward(x))

    bundle = net.backward(x, upstream)
    for params, grads in ((net.weights, bundle.d_weights), (net.biases, bundle.d_biases)):
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + h
                f_plus = value()
                p[idx] = orig - h
                f_minus = value()
                p[idx] = orig
                fd = (f_plus - f_minus) / (2 * h)
                assert abs(g[idx] - fd) <= rtol * max(1.0, abs(fd)), (idx, g[idx], fd)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(42)
    for seed in range(3):
        net = rand_net([4, 6, 6, 3], seed=seed)
        central_difference_check(net, rng.normal(size=4), rng.normal(size=3))


def test_backward_batch_sums_per_sample_gradients():
    net = rand_net([3, 5, 2], seed=9)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 2))
    batched = net.backward_batch(x, g)
    summed = None
    for b in range(4):
        one = net.backward(x[b], g[b])
        if summed is None:
            summed = one
        else:
            summed.add_(one)
    for a, b in zip(batched.all_arrays(), summed.all_arrays()):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_backward_shape_mismatch_rejected():
    net = rand_net([3, 4, 2], seed=1)
    with pytest.raises(ConfigError):
        net.backward(np.ones(3), np.ones(3))


# -- Adam ----------------------------------------------------------------------


def zero_bundle(net):
    return GradientBundle([np.zeros_like(w) for w in net.weights],
                          [np.zeros_like(b) for b in net.biases])


def test_adam_zero_gradient_keeps_parameters():
    net = rand_net([3, 4, 2], seed=3)
    before = [w.copy() for w in net.weights]
    for _ in range(5):
        net.adam_step(zero_bundle(net), lr=0.1)
    for w0, w1 in zip(before, net.weights):
        assert np.array_equal(w0, w1)
    assert net.step_count == 5
    assert all(np.all(m == 0) for m in net.m_weights)


def test_adam_first_step_hand_value():
    # scalar parameter, gradient 2, lr 0.1:
    # m_hat = 2, v_hat = 4, update = -0.1 * 2 / (2 + eps)
    net = MlpNet.zeros([1, 1])
    grads = GradientBundle([np.array([[2.0]])], [np.zeros(1)])
    net.adam_step(grads, lr=0.1)
    expected = -0.1 * 2.0 / (2.0 + ADAM_EPS)
    assert net.weights[0][0, 0] == pytest.approx(expected, rel=1e-12)
    assert net.step_count == 1


def test_adam_deterministic_across_identical_nets():
    a = rand_net([4, 8, 3], seed=7)
    b = a.clone()
    g = a.backward(np.arange(4.0), np.ones(3))
    a.adam_step(g, lr=1e-3)
    b.adam_step(g, lr=1e-3)
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(wa, wb)


def test_adam_rejects_nonfinite_gradients():
    net = rand_net([2, 3, 1], seed=4)
    grads = zero_bundle(net)
    grads.d_weights[0][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        net.adam_step(grads, lr=1e-3)


def test_adam_rejects_nonpositive_lr():
    net = rand_net([2, 3, 1], seed=4)
    with pytest.raises(ConfigError):
        net.adam_step(zero_bundle(net), lr=0.0)


def test_clip_bundles_global_norm():
    bundle = GradientBundle([np.full((2, 2), 3.0)], [np.zeros(2)])
    norm = clip_bundles_global_norm([bundle], max_norm=3.0)
    assert norm == pytest.approx(6.0)
    assert bundle.global_norm() == pytest.approx(3.0)


# -- logsumexp -------------------------------------------------------------------


def test_logsumexp_uniform_pair():
    assert logsumexp_stable([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_single_element_is_identity():
    for x in (-5.0, 0.0, 3.25, 1e6):
        assert logsumexp_stable([x]) == pytest.approx(x, rel=1e-12)


def test_logsumexp_no_overflow_at_large_values():
    assert logsumexp_stable([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0))
    assert np.isfinite(logsumexp_stable([1e6, -1e6, 1e6]))


def test_logsumexp_empty_rejected():
    with pytest.raises(ConfigError):
        logsumexp_stable([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-1e5, max_value=1e5), min_size=1, max_size=12))
def test_logsumexp_bounds(values):
    lse = logsumexp_stable(values)
    assert lse >= max(values) - 1e-9
    assert lse <= max(values) + math.log(len(values)) + 1e-9


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = rand_net([3, 16, 16, 5], seed=13)
    g = net.backward(np.ones(3), np.ones(5))
    net.adam_step(g, lr=1e-3)
    path = tmp_path / "net.ckpt"
    net.save(path)
    loaded = MlpNet.load(path)
    assert loaded.layer_dims == net.layer_dims
    assert loaded.step_count == net.step_count
    for a, b in zip(net.weights + net.biases, loaded.weights + loaded.biases):
        assert np.array_equal(a, b)
    for a, b in zip(net.m_weights + net.v_weights, loaded.m_weights + loaded.v_weights):
        assert np.array_equal(a, b)


def test_checkpoint_without_adam_section(tmp_path):
    net = rand_net([2, 4, 1], seed=14)
    path = tmp_path / "net.ckpt"
    net.save(path, include_adam=False)
    loaded = MlpNet.load(path)
    assert loaded.step_count == 0
    assert np.array_equal(loaded.weights[0], net.weights[0])


def test_checkpoint_bad_magic_rejected():
    net = rand_net([2, 3, 1], seed=15)
    blob = bytearray(net.to_bytes())
    blob[0] ^= 0xFF
    with pytest.raises(DataFormatError):
        MlpNet.from_bytes(bytes(blob))


def test_checkpoint_truncation_rejected():
    net = rand_net([2, 3, 1], seed=16)
    blob = net.to_bytes()
    with pytest.raises(DataFormatError):
        MlpNet.from_bytes(blob[:-5])


def test_checkpoint_trailing_garbage_rejected():
    net = rand_net([2, 3, 1], seed=17)
    with pytest.raises(DataFormatError):
        MlpNet.from_bytes(net.to_bytes() + b"x")


# -- construction validation -------------------------------------------------------


def test_mismatched_layer_chain_rejected():
    with pytest.raises(ConfigError):
        MlpNet([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


def test_he_uniform_seeded_reproducibility():
    a = rand_net([6, 32, 7], seed=21)
    b = rand_net([6, 32, 7], seed=21)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    limit = math.sqrt(6.0 / 6)
    assert np.abs(a.weights[0]).max() <= limit
    assert all(np.all(bias == 0) for bias in a.biases)
