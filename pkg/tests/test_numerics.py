import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from antn import numerics as nx
from antn.errors import ConfigError

from conftest import head_loss, make_net

finite = st.floats(-10, 10, allow_nan=False)


class TinyConv:
    """One 1x1 or 3x3 convolution wrapped in the network interface."""

    def __init__(self, k, cin, cout, rng):
        self.params = nx.ParamStore()
        self.params.add("w", rng.normal(size=(k, k, cin, cout)))
        self.params.add("b", rng.normal(size=cout))

    def forward(self, x):
        self.x = x
        return nx.conv2d_forward(x, self.params["w"], self.params["b"])

    def backward(self, g):
        gx, gw, gb = nx.conv2d_backward(self.x, self.params["w"], g)
        self.params.accumulate("w", gw)
        self.params.accumulate("b", gb)
        return gx


def test_conv_identity_1x1(rng):
    x = rng.normal(size=(2, 5, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(nx.conv2d_forward(x, w, np.zeros(3)), x)


@pytest.mark.parametrize("pos,expected", [((2, 2), 45.0), ((0, 0), 20.0), ((0, 2), 30.0)])
def test_conv_ones_kernel_on_constant(pos, expected):
    x = np.full((1, 5, 5, 1), 5.0)
    out = nx.conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out[0, pos[0], pos[1], 0] == expected


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 4, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((4, 5, 3))
    for i in range(4):
        for j in range(5):
            for o in range(3):
                ref[i, j, o] = b[o] + np.sum(xp[i : i + 3, j : j + 3, :] * w[:, :, :, o])
    assert np.allclose(nx.conv2d_forward(x, w, b)[0], ref, atol=1e-12)


@given(a=finite, b=finite)
def test_conv_linear_in_input(a, b):
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 1, 4, 4, 2))
    w = rng.normal(size=(3, 3, 2, 2))
    z = np.zeros(2)
    lhs = nx.conv2d_forward(a * x + b * y, w, z)
    rhs = a * nx.conv2d_forward(x, w, z) + b * nx.conv2d_forward(y, w, z)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ConfigError, match="channels"):
        nx.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


def test_conv_backward_zero_upstream(rng):
    x = rng.normal(size=(1, 4, 4, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    gx, gw, gb = nx.conv2d_backward(x, w, np.zeros((1, 4, 4, 3)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_identity_passes_upstream(rng):
    x = rng.normal(size=(1, 3, 3, 2))
    g = rng.normal(size=(1, 3, 3, 2))
    gx, _, _ = nx.conv2d_backward(x, np.eye(2).reshape(1, 1, 2, 2), g)
    assert np.array_equal(gx, g)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradients_match_finite_differences(k, rng):
    layer = TinyConv(k, 1, 1, rng)
    x = rng.normal(size=(1, 4, 4, 1))
    t = rng.normal(size=(1, 4, 4, 1))
    loss = lambda out: (0.5 * np.sum((out - t) ** 2), out - t)
    assert nx.finite_diff_check(layer, x, loss) < 1e-6


def test_single_conv_weighted_ce_gradcheck(rng):
    layer = TinyConv(1, 3, 4, rng)
    x = rng.normal(size=(1, 3, 3, 3))
    post = rng.dirichlet(np.ones(4), size=(1, 3, 3))
    loss = lambda out: nx.weighted_cross_entropy(nx.softmax_over_axis(out, 4), post)
    assert nx.finite_diff_check(layer, x, loss) < 1e-6


def test_zero_loss_gives_zero_error(rng):
    layer = TinyConv(3, 2, 2, rng)
    x = rng.normal(size=(1, 4, 4, 2))
    loss = lambda out: (np.sum(out * 0.0), np.zeros_like(out))
    assert nx.finite_diff_check(layer, x, loss) == 0.0


@pytest.mark.parametrize("kind", ["clean", "row-softmax", "uniform-remainder"])
def test_full_unet_gradcheck(kind):
    net = make_net(kind, seed=7)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 8, 8, 3))
    report = nx.finite_diff_report(net, x, head_loss(net, rng, (1, 8, 8)), max_per_tensor=12, rng=rng)
    assert report.max_rel_error < 1e-5
    assert report.checked > 10 * report.skipped_kinks


def test_gradcheck_refuses_huge_networks():
    net = make_net("clean", seed=0, f=16)
    with pytest.raises(ConfigError, match="too many"):
        nx.finite_diff_check(net, np.zeros((1, 8, 8, 3)), lambda o: (np.sum(o), np.ones_like(o)))


def test_maxpool_and_upsample():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out, idx = nx.maxpool2_forward(x)
    assert out.reshape(-1).tolist() == [4.0]
    g = nx.maxpool2_backward(np.ones((1, 1, 1, 1)), idx)
    assert g.reshape(-1).tolist() == [0.0, 0.0, 0.0, 1.0]
    up = nx.upsample2_forward(np.full((1, 1, 1, 1), 7.0))
    assert up.reshape(2, 2).tolist() == [[7.0, 7.0], [7.0, 7.0]]
    assert nx.upsample2_backward(np.ones((1, 2, 2, 1))).item() == 4.0


def test_concat_preserves_source_order(rng):
    a = rng.normal(size=(1, 2, 2, 2))
    b = rng.normal(size=(1, 2, 2, 3))
    cat = nx.concat_channels(a, b)
    assert cat.shape == (1, 2, 2, 5)
    ga, gb = nx.concat_backward(cat, 2)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)


def test_pool_upsample_concat_dispatch(rng):
    x = rng.normal(size=(1, 4, 4, 2))
    assert nx.pool_upsample_concat(x, "maxpool2").shape == (1, 2, 2, 2)
    assert nx.pool_upsample_concat(x, "upsample2").shape == (1, 8, 8, 2)
    assert nx.pool_upsample_concat(x, "concat", x).shape == (1, 4, 4, 4)
    with pytest.raises(ConfigError):
        nx.pool_upsample_concat(x, "transpose")


@pytest.mark.parametrize(
    "logits,expected",
    [
        ((0.0, 0.0, 0.0), (1 / 3, 1 / 3, 1 / 3)),
        ((1000.0, 0.0), (1.0, 0.0)),
        ((1.0, 2.0, 3.0), (0.09003057, 0.24472847, 0.66524096)),
    ],
)
def test_softmax_values(logits, expected):
    x = np.array(logits)
    assert np.allclose(nx.softmax_over_axis(x, x.size), expected, atol=1e-8)


@given(arrays(np.float64, (3, 6), elements=st.floats(-500, 500)))
def test_softmax_groups_are_distributions(x):
    p = nx.softmax_over_axis(x, 3)
    assert np.all(p >= 0)
    assert np.allclose(p.reshape(3, 2, 3).sum(-1), 1.0, atol=1e-12)


@given(arrays(np.float64, 7, elements=st.floats(-700, 700)))
def test_sigmoid_stable_and_bounded(x):
    s = nx.sigmoid(x)
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    assert np.allclose(s + nx.sigmoid(-x), 1.0, atol=1e-12)


def test_weighted_ce_cases():
    oh = np.eye(3)[[0, 2]]
    assert float(nx.weighted_cross_entropy(oh, oh)[0]) == 0.0
    w = np.random.default_rng(0).dirichlet(np.ones(4), size=5)
    assert np.isclose(float(nx.weighted_cross_entropy(np.full((5, 4), 0.25), w)[0]), np.log(4))
    loss, _ = nx.weighted_cross_entropy(np.array([[0.8, 0.2]]), np.array([[0.871, 0.129]]))
    assert float(loss) == pytest.approx(-0.871 * np.log(0.8) - 0.129 * np.log(0.2), abs=1e-15)
    assert float(loss) == pytest.approx(0.40196, abs=5e-5)


def test_sgd_closed_forms():
    store = nx.ParamStore()
    store.add("p", np.array([1.0]))
    store.accumulate("p", np.array([2.0]))
    nx.sgd_step(store, 0.1)
    assert store["p"][0] == pytest.approx(0.8)
    store.zero_grad()
    nx.sgd_step(store, 0.1)
    assert store["p"][0] == pytest.approx(0.8)


def test_param_store_flat_roundtrip(rng):
    store = nx.ParamStore()
    store.add("a", rng.normal(size=(2, 3)))
    store.add("b", rng.normal(size=4))
    flat = store.flat()
    other = store.copy()
    other.load_flat(np.zeros_like(flat))
    assert not other.flat().any()
    other.load_flat(flat)
    assert np.array_equal(other.flat(), flat)
    with pytest.raises(ConfigError):
        other.load_flat(flat[:-1])


def test_adam_first_step_is_lr_times_sign():
    store = nx.ParamStore()
    store.add("p", np.array([1.0, -1.0]))
    store.accumulate("p", np.array([3.0, -0.5]))
    nx.Adam(store).step(0.01)
    assert np.allclose(store["p"], [0.99, -0.99], atol=1e-8)


def test_unknown_optimizer_rejected():
    with pytest.raises(ConfigError):
        nx.make_optimizer("rmsprop", nx.ParamStore())
