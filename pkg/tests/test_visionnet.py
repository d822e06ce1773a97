import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import correlate

from voxagent.tensor import DTensor, backward, default_dtype, ops
from voxagent.visionnet import (
    NetConfig,
    VisionNet,
    level_shapes,
    native_conv,
    phi_mix,
    spacing_schedule,
    stream_attention,
)
from voxagent.voxelcore import DomainError, Spacing, VoxelGrid, spacing_affine

SMALL = NetConfig(levels=3, top_channels=4, deep_channels=8, attn_dim=4, summary_dim=6, phi_dim=3)


def _grid(shape, spacing=(1.0, 1.0, 1.0), seed=0):
    values = np.random.default_rng(seed).random(shape).astype(np.float32)
    return VoxelGrid(values, spacing_affine(shape, spacing))


def _sched(s, L):
    return [sp.as_tuple() for sp in spacing_schedule(Spacing(*s), L)]


# spacing schedule -----------------------------------------------------------

def test_schedule_isotropic():
    assert _sched((1, 1), 4) == [(1, 1), (2, 2), (4, 4), (8, 8)]


def test_schedule_thick_slices():
    assert _sched((1, 6), 4) == [(1, 6), (2, 6), (4, 6), (8, 8)]


def test_schedule_omega_two_is_not_thick():
    assert _sched((1, 2), 3) == [(1, 2), (2, 2), (4, 4)]


@settings(max_examples=50, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.3, 12.0), st.integers(1, 8))
def test_schedule_properties(s_inp, s_sep, levels):
    sched = spacing_schedule(Spacing(s_inp, s_sep), levels)
    assert len(sched) == levels
    for a, b in zip(sched[:-1], sched[1:]):
        assert b.s_inp == pytest.approx(2 * a.s_inp)
        assert b.s_sep >= a.s_sep
    if s_inp * 2 ** (levels - 2) >= s_sep / 2:
        assert sched[-1].omega <= 2


def test_level_shapes_isotropic():
    sched = spacing_schedule(Spacing(1, 1), 4)
    assert level_shapes((16, 16, 8), sched) == [(16, 16, 8), (8, 8, 4), (4, 4, 2), (2, 2, 1)]


# native convolution ---------------------------------------------------------

def test_native_conv_isotropic_is_conv3d():
    rng = np.random.default_rng(0)
    x, w = DTensor(rng.standard_normal((1, 2, 4, 4, 4))), DTensor(rng.standard_normal((3, 2, 3, 3, 3)))
    np.testing.assert_array_equal(native_conv(x, w, None, Spacing(1, 1)).numpy(), ops.conv3d(x, w).numpy())


def test_native_conv_thick_matches_slicewise_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    with default_dtype(np.float64):
        out = native_conv(DTensor(x), DTensor(w), None, Spacing(1, 3)).numpy()
    oracle = np.zeros_like(out)
    for o in range(2):
        for z in range(4):
            oracle[0, o, :, :, z] = sum(correlate(x[0, c, :, :, z], w[o, c, :, :, 1], mode="constant") for c in range(2))
    np.testing.assert_allclose(out, oracle, atol=1e-6)


def test_native_conv_single_slice():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, 4, 4, 1))
    w = rng.standard_normal((1, 1, 3, 3, 3))
    with default_dtype(np.float64):
        out = native_conv(DTensor(x), DTensor(w), None, Spacing(1, 5)).numpy()
    ref = correlate(x[0, 0, :, :, 0], w[0, 0, :, :, 1], mode="constant")
    np.testing.assert_allclose(out[0, 0, :, :, 0], ref, atol=1e-10)


# phi mixing -----------------------------------------------------------------

def test_phi_mix_zero_weights():
    rng = np.random.default_rng(3)
    a = DTensor(rng.standard_normal((2, 3, 2, 2, 2)))
    phi = DTensor(rng.standard_normal((2, 4)))
    out = phi_mix(a, phi, DTensor(np.zeros((7, 3))))
    assert not out.numpy().any()


def test_phi_mix_identity_on_features():
    rng = np.random.default_rng(4)
    a = DTensor(rng.standard_normal((2, 3, 2, 3, 2)))
    phi = DTensor(rng.standard_normal((2, 4)))
    w = np.zeros((7, 3))
    w[:3] = np.eye(3)
    np.testing.assert_allclose(phi_mix(a, phi, DTensor(w)).numpy(), a.numpy(), atol=1e-6)


def test_phi_mix_gradient_reaches_phi():
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        a = DTensor(rng.standard_normal((1, 3, 2, 2, 2)))
        phi = DTensor(rng.standard_normal((1, 4)), requires_grad=True)
        w = DTensor(rng.standard_normal((7, 3)))
        loss = ops.sum(ops.silu(phi_mix(a, phi, w)))
        backward(loss)
        analytic = phi.grad[0, 1]
        e = 1e-6
        vals = []
        for sign in (1, -1):
            p = phi.data.copy()
            p[0, 1] += sign * e
            vals.append(ops.sum(ops.silu(phi_mix(a, DTensor(p), w))).item())
    numeric = (vals[0] - vals[1]) / (2 * e)
    assert abs(analytic) > 1e-6
    assert analytic == pytest.approx(numeric, rel=1e-5)


# stream attention -----------------------------------------------------------

def _attn_weights(rng, c, b):
    return [DTensor(rng.standard_normal(s)) for s in ((c, b), (c, b), (c, b), (b, c))]


def test_attention_single_stream():
    rng = np.random.default_rng(6)
    with default_dtype(np.float64):
        a = DTensor(rng.standard_normal((1, 3, 2, 2, 2)))
        wq, wk, wv, wf = _attn_weights(rng, 3, 4)
        out = stream_attention(a, wq, wk, wv, wf).numpy()
    vox = a.numpy()[0].reshape(3, -1).T
    expected = vox @ wv.numpy() @ wf.numpy() + vox
    np.testing.assert_allclose(out[0].reshape(3, -1).T, expected, atol=1e-10)


@pytest.mark.parametrize("streams", [1, 2, 3, 4])
def test_attention_permutation_equivariant(streams):
    rng = np.random.default_rng(7 + streams)
    a = rng.standard_normal((streams, 3, 2, 2, 1)).astype(np.float32)
    w = _attn_weights(rng, 3, 4)
    perm = rng.permutation(streams)
    out = stream_attention(DTensor(a), *w).numpy()
    out_p = stream_attention(DTensor(a[perm]), *w).numpy()
    np.testing.assert_allclose(out_p, out[perm], atol=1e-5)


def test_attention_two_streams_by_hand():
    # one voxel, c = 2, b = 2
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[2.0, 0.0], [0.0, 1.0]])
    wv = np.array([[1.0, 1.0], [0.0, 1.0]])
    wf = np.array([[1.0, 0.0], [0.0, -1.0]])
    q, k, v = a @ wq, a @ wk, a @ wv
    scores = q @ k.T / np.sqrt(2.0)
    # scores = [[2, 0], [0, 4]] / sqrt(2)
    np.testing.assert_allclose(scores, np.array([[2.0, 0.0], [0.0, 4.0]]) / np.sqrt(2))
    e = np.exp(scores)
    attn = e / e.sum(1, keepdims=True)
    expected = attn @ v @ wf + a
    with default_dtype(np.float64):
        out = stream_attention(DTensor(a.reshape(2, 2, 1, 1, 1)), *(DTensor(m) for m in (wq, wk, wv, wf))).numpy()
    np.testing.assert_allclose(out.reshape(2, 2), expected, atol=1e-10)


# encode / generate ----------------------------------------------------------

def test_encode_shapes_isotropic():
    net = VisionNet(NetConfig(levels=4, top_channels=4, deep_channels=8, attn_dim=4, summary_dim=6, phi_dim=3))
    enc = net.encode([_grid((16, 16, 8))], [np.zeros(3)])
    assert [f.shape[2:] for f in enc.features] == [(16, 16, 8), (8, 8, 4), (4, 4, 2), (2, 2, 1)]
    assert enc.summary.shape == (1, 6)


@pytest.mark.parametrize("streams", [1, 2, 3, 4])
def test_encode_generate_any_stream_count(streams):
    net = VisionNet(SMALL, seed=1)
    vols = [_grid((8, 8, 4), seed=s) for s in range(streams)]
    phis = [np.random.default_rng(s).standard_normal(3) for s in range(streams)]
    enc = net.encode(vols, phis)
    assert enc.streams == streams and len(enc.features) == SMALL.levels
    assert enc.summary.shape == (streams, SMALL.summary_dim)
    out = net.generate(enc, np.ones(3, dtype=np.float32))
    p = out.prob.numpy()
    assert p.shape == (8, 8, 4)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(out.reference.affine, vols[0].affine)


def test_mismatched_streams_resampled_to_first():
    net = VisionNet(SMALL)
    a = _grid((8, 8, 4), (1.0, 1.0, 2.0))
    b = _grid((4, 4, 4), (2.0, 2.0, 2.0), seed=1)
    enc = net.encode([a, b], [np.zeros(3)] * 2)
    assert enc.features[0].shape[2:] == (8, 8, 4)


def test_encode_errors():
    net = VisionNet(SMALL)
    with pytest.raises(DomainError):
        net.encode([], [])
    with pytest.raises(DomainError):
        net.encode([_grid((8, 8, 4))], [np.zeros(3)] * 2)
    enc = net.encode([_grid((8, 8, 4))], [np.zeros(3)])
    enc.features = enc.features[:-1]
    with pytest.raises(DomainError):
        net.generate(enc, np.zeros(3))


def test_no_dead_parameters_under_dice():
    net = VisionNet(SMALL, seed=2)
    vols = [_grid((8, 8, 4), seed=3), _grid((8, 8, 4), seed=4)]
    rng = np.random.default_rng(5)
    phis = [DTensor(rng.standard_normal(3).astype(np.float32), requires_grad=True) for _ in range(2)]
    enc = net.encode(vols, phis)
    out = net.generate(enc, DTensor(rng.standard_normal(3).astype(np.float32)))
    target = np.zeros((8, 8, 4))
    target[2:6, 2:6, 1:3] = 1
    loss = ops.add(ops.soft_dice_loss(out.prob, target), ops.sum(enc.summary))
    backward(loss)
    dead = [n for n, p in net.params.items() if p.grad is None or not np.any(p.grad)]
    assert not dead, dead
    assert all(np.any(p.grad) for p in phis)


def test_dice_gradient_reaches_level0_by_finite_difference():
    with default_dtype(np.float64):
        net = VisionNet(SMALL, seed=3)
        for p in net.params.values():
            p.data = p.data.astype(np.float64)
        vol = _grid((8, 8, 4), seed=6)
        target = np.zeros((8, 8, 4))
        target[3:6, 2:7, 1:3] = 1
        phi = np.random.default_rng(7).standard_normal(3)

        def loss():
            enc = net.encode([vol], [phi])
            return ops.soft_dice_loss(net.generate(enc, phi).prob, target)

        backward(loss())
        w = net.params["enc0.conv.w"]
        idx = (1, 0, 1, 1, 1)
        analytic = w.grad[idx]
        e = 1e-6
        orig = w.data[idx]
        w.data[idx] = orig + e
        fp = loss().item()
        w.data[idx] = orig - e
        fm = loss().item()
        w.data[idx] = orig
    assert abs(analytic) > 0
    assert analytic == pytest.approx((fp - fm) / (2 * e), rel=1e-4, abs=1e-9)
