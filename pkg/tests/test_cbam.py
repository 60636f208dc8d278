import numpy as np
import pytest

from danet.cbam import CbamWeights, cbam_apply, channel_attention, spatial_attention
from danet.nn import ConvWeights
from danet.tensor import Tensor


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def make(rng, c, r, scale=1.0, bias=False):
    w = CbamWeights.init(rng, c, r, mlp_bias=bias, dtype=np.float64)
    for _, p in w.named_parameters():
        p.data = scale * rng.standard_normal(p.shape)
    return w


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def loop_channel(f, w0, w1, slope=0.01):
    c, h, wd = f.shape
    avg = [sum(f[k, i, j] for i in range(h) for j in range(wd)) / (h * wd) for k in range(c)]
    mx = [max(f[k, i, j] for i in range(h) for j in range(wd)) for k in range(c)]

    def mlp(v):
        hidden = []
        for a in range(w0.shape[0]):
            s = sum(w0[a, k] * v[k] for k in range(c))
            hidden.append(s if s > 0 else slope * s)
        return [sum(w1[k, a] * hidden[a] for a in range(len(hidden))) for k in range(c)]

    ma, mm = mlp(avg), mlp(mx)
    return np.array([sig(ma[k] + mm[k]) for k in range(c)]).reshape(c, 1, 1)


def loop_spatial(f, kern, bias):
    c, h, wd = f.shape
    mean = np.array([[sum(f[k, i, j] for k in range(c)) / c for j in range(wd)] for i in range(h)])
    mx = np.array([[max(f[k, i, j] for k in range(c)) for j in range(wd)] for i in range(h)])
    maps = (mean, mx)
    out = np.zeros((1, h, wd))
    for i in range(h):
        for j in range(wd):
            s = bias
            for ch in range(2):
                for a in range(7):
                    for b in range(7):
                        y, x = i + a - 3, j + b - 3
                        if 0 <= y < h and 0 <= x < wd:
                            s += kern[ch, a, b] * maps[ch][y, x]
            out[0, i, j] = sig(s)
    return out


def test_channel_attention_matches_loops(rng):
    w = make(rng, 8, 4)
    f = rng.standard_normal((8, 5, 4))
    got = channel_attention(t64(f), w).data
    want = loop_channel(f, w.w0.data, w.w1.data)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_spatial_attention_matches_loops(rng):
    w = make(rng, 4, 2, scale=0.3)
    f = rng.standard_normal((4, 6, 5))
    got = spatial_attention(t64(f), w).data
    want = loop_spatial(f, w.spatial.weight.data[0], w.spatial.bias.data[0])
    assert np.max(np.abs(got - want)) <= 1e-10


def test_zero_mlp_gives_half():
    w = CbamWeights.init(np.random.default_rng(0), 4, 2, dtype=np.float64)
    w.w0.data[:] = 0
    w.w1.data[:] = 0
    gate = channel_attention(t64(np.random.default_rng(1).standard_normal((4, 3, 3))), w).data
    assert np.all(gate == 0.5)


def test_constant_channels_branches_agree(rng):
    w = make(rng, 4, 2)
    v = rng.standard_normal(4)
    f = np.broadcast_to(v[:, None, None], (4, 3, 5)).copy()
    gate = channel_attention(t64(f), w).data.ravel()
    hidden = w.w0.data @ v
    hidden = np.where(hidden > 0, hidden, 0.01 * hidden)
    assert np.allclose(gate, sig(2 * (w.w1.data @ hidden)), atol=1e-12)


def test_zero_spatial_kernel_gives_half(rng):
    w = make(rng, 4, 2)
    w.spatial.weight.data[:] = 0
    w.spatial.bias.data[:] = 0
    assert np.all(spatial_attention(t64(rng.standard_normal((4, 5, 5))), w).data == 0.5)


def test_single_channel_pools_are_the_input(rng):
    w = CbamWeights.init(rng, 1, 1, dtype=np.float64)
    w.spatial.weight.data[:] = 0
    w.spatial.weight.data[0, 0, 3, 3] = 1.0  # centre tap of the mean map
    w.spatial.weight.data[0, 1, 3, 3] = -1.0  # centre tap of the max map
    # mean and max of one channel coincide, so the two taps cancel
    assert np.allclose(spatial_attention(t64(rng.standard_normal((1, 4, 4))), w).data, 0.5, atol=1e-15)


def test_forced_half_gates_quarter_output(rng):
    w = CbamWeights.init(rng, 4, 2, dtype=np.float64)
    w.w0.data[:] = 0
    w.w1.data[:] = 0
    w.spatial.weight.data[:] = 0
    f = rng.standard_normal((4, 3, 3))
    assert np.allclose(cbam_apply(t64(f), w).data, 0.25 * f, atol=1e-15)


def test_zero_input_zero_output(rng):
    w = make(rng, 8, 2)
    assert not cbam_apply(t64(np.zeros((8, 3, 3))), w).data.any()


def test_order_is_channel_then_spatial(rng):
    w = make(rng, 4, 2)
    f = t64(rng.standard_normal((4, 5, 5)))
    ordered = cbam_apply(f, w).data
    sp = spatial_attention(f, w) * f
    swapped = (channel_attention(sp, w) * sp).data
    assert np.max(np.abs(ordered - swapped)) > 1e-6


def test_shape_range_and_bound(rng):
    for _ in range(20):
        c = int(rng.choice([2, 4, 8]))
        h, wd = rng.integers(1, 9, size=2)
        w = CbamWeights.init(rng, c, 2, dtype=np.float64)
        f = rng.standard_normal((c, h, wd))
        mc = channel_attention(t64(f), w).data
        ms = spatial_attention(t64(f), w).data
        out = cbam_apply(t64(f), w).data
        assert out.shape == f.shape
        assert np.all((mc > 0) & (mc < 1)) and np.all((ms > 0) & (ms < 1))
        assert np.all(np.abs(out) <= np.abs(f))


def test_batched_matches_single(rng):
    w = make(rng, 4, 2)
    f = rng.standard_normal((3, 4, 5, 5))
    batched = cbam_apply(t64(f), w).data
    for i in range(3):
        assert np.allclose(batched[i], cbam_apply(t64(f[i]), w).data, atol=1e-14)


def test_reduction_must_divide():
    with pytest.raises(ValueError, match="divide"):
        CbamWeights.init(np.random.default_rng(0), 12, 5)


def test_spatial_kernel_must_be_7x7():
    bad = ConvWeights(np.zeros((1, 2, 3, 3)), None, 1, 1)
    with pytest.raises(ValueError, match="7x7"):
        CbamWeights(np.zeros((1, 4)), np.zeros((4, 1)), bad, 4)


def test_parameter_names():
    w = CbamWeights.init(np.random.default_rng(0), 4, 2)
    assert [n for n, _ in w.named_parameters()] == ["w0", "w1", "spatial.weight", "spatial.bias"]
