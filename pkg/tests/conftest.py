import numpy as np
import pytest
from hypothesis import settings

from antn.segnets import CleanNet, MiniUNetSpec, TransitionNet

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def randomize_biases(net, rng, scale=0.1):
    """Zero biases put many pre-activations exactly on the ReLU kink."""
    for name in net.params:
        if name.endswith(".b"):
            net.params[name][...] = rng.normal(0.0, scale, net.params[name].shape)
    return net


def make_net(kind, seed, c=4, f=4):
    rng = np.random.default_rng(seed)
    spec = MiniUNetSpec(base_filters=f, num_classes=c)
    if kind == "clean":
        net = CleanNet(spec, rng)
    else:
        net = TransitionNet(spec, kind, rng)
    return randomize_biases(net, rng)


def head_loss(net, rng, shape):
    """A loss through the net's readout with random targets, for gradient checks."""
    c = net.num_classes
    post = rng.dirichlet(np.ones(c), size=shape)
    if isinstance(net, CleanNet):
        from antn.numerics import weighted_cross_entropy

        return lambda logits: weighted_cross_entropy(net.probabilities(logits), post)
    noisy = rng.integers(0, c, size=shape)
    return lambda logits: net.column_nll(logits, noisy, post)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
