import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppgvitals import nn
from ppgvitals.errors import ShapeError, StateError
from ppgvitals.gradcheck import LAYER_TOL, check_layer, layer_items, run_suite


def conv_oracle(x, w, b, stride, pad):
    """Triple loop straight from the definition."""
    cin, length = len(x), len(x[0])
    xp = [[0.0] * pad + list(row) + [0.0] * pad for row in x]
    k = len(w[0][0])
    lout = (length + 2 * pad - k) // stride + 1
    out = []
    for c in range(len(w)):
        row = []
        for t in range(lout):
            s = b[c]
            for i in range(cin):
                for tau in range(k):
                    s += w[c][i][tau] * xp[i][t * stride + tau]
            row.append(s)
        out.append(row)
    return np.array(out)


def random_conv(rng, cin, cout, k, **kw):
    layer = nn.Conv1d(cin, cout, k, **kw)
    layer.params["weight"][...] = rng.normal(size=layer.params["weight"].shape)
    layer.params["bias"][...] = rng.normal(size=cout)
    return layer


class TestConv:
    def test_identity_kernel(self):
        layer = nn.Conv1d(1, 1, 1)
        layer.params["weight"][...] = 1.0
        x = np.random.default_rng(0).normal(size=(2, 1, 9))
        np.testing.assert_array_equal(layer.forward(x), x)
        dy = np.random.default_rng(1).normal(size=x.shape)
        np.testing.assert_array_equal(layer.backward(dy), dy)

    def test_sliding_sums(self):
        layer = nn.Conv1d(1, 1, 3, padding="valid")
        layer.params["weight"][...] = 1.0
        out = layer.forward(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        np.testing.assert_array_equal(out, [[[6.0, 9.0]]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        layer = random_conv(rng, 3, 8, 5)
        x = rng.normal(size=(1, 3, 40))
        ref = conv_oracle(x[0].tolist(), layer.params["weight"].tolist(), layer.params["bias"].tolist(), 1, 2)
        np.testing.assert_allclose(layer.forward(x)[0], ref, atol=1e-12, rtol=0)

    def test_strided_valid_matches_loop(self):
        rng = np.random.default_rng(3)
        layer = random_conv(rng, 2, 3, 4, stride=3, padding="valid")
        x = rng.normal(size=(1, 2, 23))
        ref = conv_oracle(x[0].tolist(), layer.params["weight"].tolist(), layer.params["bias"].tolist(), 3, 0)
        np.testing.assert_allclose(layer.forward(x)[0], ref, atol=1e-12, rtol=0)

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(4)
        layer = random_conv(rng, 2, 3, 3)
        layer.forward(rng.normal(size=(2, 2, 10)))
        layer.backward(np.zeros((2, 3, 10)))
        assert not np.any(layer.grads["weight"]) and not np.any(layer.grads["bias"])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nn.Conv1d(3, 4, 3).forward(np.zeros((1, 2, 10)))

    def test_backward_without_forward(self):
        with pytest.raises(StateError):
            nn.Conv1d(1, 1, 3).backward(np.zeros((1, 1, 5)))

    def test_even_kernel_same_rejected(self):
        with pytest.raises(ValueError):
            nn.Conv1d(1, 1, 4)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5, 7]), st.integers(7, 40), st.integers(1, 3))
    def test_shape_algebra(self, cin, cout, k, length, stride):
        same = nn.Conv1d(cin, cout, k)
        assert same.forward(np.zeros((1, cin, length))).shape == (1, cout, length)
        valid = nn.Conv1d(cin, cout, k, stride=stride, padding="valid")
        out = valid.forward(np.zeros((2, cin, length)))
        assert out.shape == (2, cout, (length - k) // stride + 1)
        assert valid.output_shape((cin, length)) == out.shape[1:]


class TestSimpleLayers:
    def test_relu(self):
        r = nn.ReLU()
        np.testing.assert_array_equal(r.forward(np.array([[[-1.0, 0.0, 2.0]]])), [[[0, 0, 2]]])
        np.testing.assert_array_equal(r.backward(np.ones((1, 1, 3))), [[[0, 0, 1]]])

    def test_maxpool(self):
        p = nn.MaxPool1d()
        np.testing.assert_array_equal(p.forward(np.array([[[1.0, 3.0, 2.0, 2.0]]])), [[[3, 2]]])
        # the tie in the second window routes to its first index
        np.testing.assert_array_equal(p.backward(np.array([[[5.0, 7.0]]])), [[[0, 5, 7, 0]]])

    def test_maxpool_odd_length(self):
        p = nn.MaxPool1d()
        x = np.arange(75.0)[None, None, :]
        out = p.forward(x)
        assert out.shape == (1, 1, 37)
        assert out[0, 0, -1] == 73.0

    def test_dense(self):
        d = nn.Dense(2, 2)
        d.params["weight"][...] = [[1, 2], [3, 4]]
        np.testing.assert_array_equal(d.forward(np.array([[1.0, 1.0]])), [[3, 7]])
        d.params["weight"][...] = np.eye(2)
        np.testing.assert_array_equal(d.forward(np.array([[0.5, -2.0]])), [[0.5, -2.0]])

    def test_gap(self):
        g = nn.GlobalAvgPool()
        assert g.forward(np.array([[[2.0, 4.0, 6.0]]]))[0, 0] == 4.0
        assert g.forward(np.full((1, 1, 17), 0.3))[0, 0] == pytest.approx(0.3, abs=1e-15)
        x = np.random.default_rng(0).normal(size=(1, 4, 33))
        np.testing.assert_allclose(g.forward(x)[0], [sum(r) / 33 for r in x[0].tolist()], atol=1e-12)

    def test_gap_gradient_constant_in_time(self):
        g = nn.GlobalAvgPool()
        g.forward(np.random.default_rng(0).normal(size=(2, 3, 11)))
        dx = g.backward(np.random.default_rng(1).normal(size=(2, 3)))
        assert np.all(dx == dx[:, :, :1])


class TestBatchNorm:
    def test_infer_identity(self):
        bn = nn.BatchNorm1d(2, eps=0.0)
        x = np.random.default_rng(0).normal(size=(3, 2, 5))
        np.testing.assert_array_equal(bn.forward(x, train=False), x)

    def test_train_statistics(self):
        bn = nn.BatchNorm1d(3)
        x = np.random.default_rng(1).normal(2.0, 3.0, size=(8, 3, 20))
        bn.forward(x, train=True)
        xhat = bn._cache[0]
        var = x.var(axis=(0, 2))
        assert np.max(np.abs(xhat.mean(axis=(0, 2)))) < 1e-9
        np.testing.assert_allclose(xhat.var(axis=(0, 2)), var / (var + bn.eps), atol=1e-9)

    def test_train_unit_variance_for_large_inputs(self):
        bn = nn.BatchNorm1d(2)
        x = np.random.default_rng(2).normal(0.0, 1e4, size=(6, 2, 30))
        y = bn.forward(x, train=True)
        assert np.max(np.abs(y.var(axis=(0, 2)) - 1.0)) < 1e-9

    def test_running_stats_momentum(self):
        bn = nn.BatchNorm1d(1)
        x = np.random.default_rng(3).normal(5.0, 2.0, size=(4, 1, 10))
        bn.forward(x, train=True)
        assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * x.mean())
        assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var())


@pytest.mark.parametrize("item", layer_items(), ids=lambda it: it[0])
def test_layer_finite_differences(item):
    name, layer, x, train = item
    rep = check_layer(layer, x, train)
    assert rep.checked > 0
    assert rep.max_rel_error < LAYER_TOL, (name, rep)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_finite_differences_other_draws(seed):
    for result in run_suite(seed=seed):
        assert result.passed, result


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    blk = nn.ResidualBlock(4, 3)
    for c in (blk.conv1, blk.conv2):
        c.params["weight"][...] = rng.normal(size=c.params["weight"].shape)
    x = rng.normal(size=(3, 4, 50))
    assert blk.forward(x).tobytes() == blk.forward(x.copy()).tobytes()


class TestGradCheck:
    def test_linear_model_mse_exact(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=5)
        x = rng.normal(size=(20, 5))
        y = rng.normal(size=20)

        def loss():
            return float(np.mean((x @ w - y) ** 2))

        grad = 2 * x.T @ (x @ w - y) / 20
        assert nn.grad_check(loss, [w], [grad]).max_rel_error < 1e-9

    def test_planted_fault_detected(self):
        results = run_suite(fault=0.1)
        assert all(r.max_rel_error > 1e-2 and not r.passed for r in results)

    def test_kink_crossings_skipped(self):
        x = np.array([[[1e-7, 0.5]]])
        r = nn.ReLU()

        def loss():
            return float(np.sum(r.forward(x)))

        r.forward(x)
        rep = nn.grad_check(loss, [x], [r.backward(np.ones_like(x))], kink_state=r.kink_state)
        assert rep.skipped == 1 and rep.checked == 1
