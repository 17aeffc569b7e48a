"""Mini encoder-decoder networks for the clean-label and transition predictors.

All three component networks share one trunk layout::

    conv3(in->F) relu conv3(F->F) relu ---------------------------- skip
      maxpool2 conv3(F->2F) relu conv3(2F->2F) relu upsample2       |
                                         concat [skip, up] (3F) <---+
      conv3(3F->F) relu conv3(F->F) relu conv1(F->head)

and differ only in the width and normalisation of the 1x1 head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError

HEAD_CLEAN = "clean"
HEAD_SOFTMAX = "transition-softmax"
HEAD_REMAINDER = "transition-remainder"
HEAD_KINDS = (HEAD_CLEAN, HEAD_SOFTMAX, HEAD_REMAINDER)

READOUT_MODES = ("row-softmax", "uniform-remainder")

_CONVS = (
    # name, kernel, in multiple of F (or input), out multiple of F
    ("enc1", 3, None, 1),
    ("enc2", 3, 1, 1),
    ("mid1", 3, 1, 2),
    ("mid2", 3, 2, 2),
    ("dec1", 3, 3, 1),
    ("dec2", 3, 1, 1),
)


@dataclass
class MiniUNetSpec:
    base_filters: int = 16
    depth: int = 2
    in_channels: int = 3
    num_classes: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_filters < 2:
            raise ConfigError(f"base_filters must be >= 2, got {self.base_filters}")
        if self.depth != 2:
            raise ConfigError("only depth 2 (one pooling level) is supported")


def head_channels(kind: str, num_classes: int) -> int:
    if kind == HEAD_CLEAN or kind == HEAD_REMAINDER:
        return num_classes
    if kind == HEAD_SOFTMAX:
        return num_classes * num_classes
    raise ConfigError(f"unknown head kind {kind!r}")


class MiniUNet:
    """Trunk plus linear 1x1 head, producing raw logits.

    ``forward`` caches activations for one subsequent ``backward`` call;
    ``backward`` accumulates into ``params.grads`` and returns the input
    gradient.
    """

    def __init__(
        self,
        spec: MiniUNetSpec,
        head_kind: str,
        rng: Optional[np.random.Generator] = None,
        head_bias: Optional[np.ndarray] = None,
    ):
        self.spec = spec
        self.head_kind = head_kind
        self.out_channels = head_channels(head_kind, spec.num_classes)
        self.params = nx.ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        f = spec.base_filters
        for name, k, cin, cout in _CONVS:
            ci = spec.in_channels if cin is None else cin * f
            co = cout * f
            std = np.sqrt(2.0 / (k * k * ci))
            self.params.add(name + ".w", rng.normal(0.0, std, (k, k, ci, co)))
            self.params.add(name + ".b", np.zeros(co))
        self.params.add("head.w", rng.normal(0.0, np.sqrt(1.0 / f), (1, 1, f, self.out_channels)))
        bias = np.zeros(self.out_channels) if head_bias is None else np.asarray(head_bias, float)
        if bias.shape != (self.out_channels,):
            raise ConfigError(f"head bias must have {self.out_channels} entries")
        self.params.add("head.b", bias.copy())
        self._cache: dict = {}

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def _conv(self, name: str, x: np.ndarray) -> np.ndarray:
        self._cache[name] = x
        return nx.conv2d_forward(x, self.params[name + ".w"], self.params[name + ".b"])

    def _conv_back(self, name: str, g: np.ndarray) -> np.ndarray:
        gx, gw, gb = nx.conv2d_backward(self._cache[name], self.params[name + ".w"], g)
        self.params.accumulate(name + ".w", gw)
        self.params.accumulate(name + ".b", gb)
        return gx

    def _relu(self, name: str, x: np.ndarray) -> np.ndarray:
        self._cache[name] = x
        return nx.relu_forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        nx._check4(x)
        if x.shape[3] != self.spec.in_channels:
            raise ConfigError(f"expected {self.spec.in_channels} input channels, got {x.shape[3]}")
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ConfigError(f"image dims must be divisible by 2, got {x.shape[1]}x{x.shape[2]}")
        self._cache = {}
        h = self._relu("r1", self._conv("enc1", x))
        skip = self._relu("r2", self._conv("enc2", h))
        h, self._cache["pool"] = nx.maxpool2_forward(skip)
        h = self._relu("r3", self._conv("mid1", h))
        h = self._relu("r4", self._conv("mid2", h))
        h = nx.upsample2_forward(h)
        h = nx.concat_channels(skip, h)
        h = self._relu("r5", self._conv("dec1", h))
        h = self._relu("r6", self._conv("dec2", h))
        return self._conv("head", h)

    def activation_pattern(self) -> list:
        """ReLU masks and pooling winners of the last forward pass."""
        c = self._cache
        return [c[r] > 0 for r in ("r1", "r2", "r3", "r4", "r5", "r6")] + [c["pool"]]

    def backward(self, g: np.ndarray) -> np.ndarray:
        if g.ndim == 3:
            g = g[None]
        f = self.spec.base_filters
        g = self._conv_back("head", g)
        g = self._conv_back("dec2", nx.relu_backward(self._cache["r6"], g))
        g = self._conv_back("dec1", nx.relu_backward(self._cache["r5"], g))
        g_skip, g = nx.concat_backward(g, f)
        g = nx.upsample2_backward(g)
        g = self._conv_back("mid2", nx.relu_backward(self._cache["r4"], g))
        g = self._conv_back("mid1", nx.relu_backward(self._cache["r3"], g))
        g = g_skip + nx.maxpool2_backward(g, self._cache["pool"])
        g = self._conv_back("enc2", nx.relu_backward(self._cache["r2"], g))
        return self._conv_back("enc1", nx.relu_backward(self._cache["r1"], g))


class CleanReadout:
    """Softmax readout shared by clean-label predictors."""

    num_classes: int

    def probabilities(self, logits: np.ndarray) -> np.ndarray:
        return nx.softmax_over_axis(logits, self.num_classes)


class CleanNet(CleanReadout, MiniUNet):
    """Predicts the per-pixel clean-label distribution Pr(y_n | X)."""

    def __init__(self, spec: MiniUNetSpec, rng=None):
        super().__init__(spec, HEAD_CLEAN, rng)


def transition_head_bias(readout_mode: str, num_classes: int, diag_logit: float = 0.0) -> np.ndarray:
    if readout_mode == "row-softmax":
        return (diag_logit * np.eye(num_classes)).ravel()
    if readout_mode == "uniform-remainder":
        # sigmoid(b) = 1/C: uniform rows whatever label is observed
        return np.full(num_classes, -np.log(num_classes - 1.0))
    raise ConfigError(f"unknown readout mode {readout_mode!r}")


class TransitionReadout:
    """Turns transition logits into rows, observed columns and the M-step loss.

    ``row-softmax`` reads C*C logits, channel ``y*C + k`` being row ``y``,
    column ``k``. ``uniform-remainder`` reads C sigmoid outputs, one per true
    class, as the probability of the observed noisy label; the rest of each
    row is spread evenly over the other C-1 columns.
    """

    num_classes: int
    readout_mode: str

    def field(self, logits: np.ndarray, noisy: Optional[np.ndarray] = None) -> np.ndarray:
        """Full per-pixel C x C row-stochastic field, shape ``(..., C, C)``."""
        c = self.num_classes
        if self.readout_mode == "row-softmax":
            t = nx.softmax_over_axis(logits, c)
            return t.reshape(*t.shape[:-1], c, c)
        if noisy is None:
            raise ConfigError("uniform-remainder readout needs the observed noisy labels")
        return remainder_rows(nx.sigmoid(logits), _match(noisy, logits), c)

    def column(self, logits: np.ndarray, noisy: np.ndarray) -> np.ndarray:
        """Per-pixel ``[Pr(obs | y=0), ..., Pr(obs | y=C-1)]``."""
        noisy = _match(noisy, logits)
        if self.readout_mode == "uniform-remainder":
            _check_range(noisy, self.num_classes)
            return nx.sigmoid(logits)
        return observed_column(self.field(logits), noisy)

    def column_nll(self, logits: np.ndarray, noisy: np.ndarray, posterior: np.ndarray):
        """Posterior-weighted ``-(1/N) sum post * log Pr(obs | y)`` and its logit gradient."""
        noisy = _match(noisy, logits)
        c = self.num_classes
        n = posterior.size // c
        if self.readout_mode == "uniform-remainder":
            p = nx.sigmoid(logits)
            loss = -np.sum(posterior * np.log(np.maximum(p, nx.LOG_CLAMP))) / n
            return loss, -posterior * (1.0 - p) / n
        t = self.field(logits)
        col = observed_column(t, noisy)
        loss = -np.sum(posterior * np.log(np.maximum(col, nx.LOG_CLAMP))) / n
        target = np.zeros_like(t)
        np.put_along_axis(target, noisy[..., None, None].repeat(c, axis=-2), 1.0, axis=-1)
        grad = posterior[..., None] * (t - target) / n
        return loss, grad.reshape(logits.shape)


class TransitionNet(TransitionReadout, MiniUNet):
    """Predicts per-pixel transition rows Pr_n(noisy | true, X) for one source."""

    def __init__(self, spec: MiniUNetSpec, readout_mode: str = "row-softmax", rng=None, diag_logit: float = 0.0):
        bias = transition_head_bias(readout_mode, spec.num_classes, diag_logit)
        kind = HEAD_SOFTMAX if readout_mode == "row-softmax" else HEAD_REMAINDER
        super().__init__(spec, kind, rng, head_bias=bias)
        self.readout_mode = readout_mode


def _match(noisy: np.ndarray, logits: np.ndarray) -> np.ndarray:
    noisy = np.asarray(noisy)
    if noisy.ndim == logits.ndim - 2:
        noisy = noisy[None]
    if noisy.shape != logits.shape[:-1]:
        raise ConfigError(f"label shape {noisy.shape} does not match {logits.shape[:-1]}")
    return noisy


def remainder_rows(p: np.ndarray, noisy: np.ndarray, c: int) -> np.ndarray:
    """Rows with ``p[y]`` at the observed column and ``(1-p[y])/(C-1)`` elsewhere."""
    rest = (1.0 - p) / (c - 1)
    t = np.repeat(rest[..., :, None], c, axis=-1)
    obs = np.broadcast_to(noisy[..., None, None], p.shape + (1,))
    np.put_along_axis(t, obs, p[..., None], axis=-1)
    return t


def _check_range(labels: np.ndarray, c: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label outside 0..{c - 1}")


def observed_column(tf: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    """Read ``tf[..., y, noisy]`` for every true class ``y``."""
    noisy = np.asarray(noisy)
    c = tf.shape[-1]
    if tf.shape[:-2] != noisy.shape:
        raise ConfigError(f"transition field {tf.shape} and labels {noisy.shape} differ")
    _check_range(noisy, c)
    idx = np.broadcast_to(noisy[..., None, None], tf.shape[:-1] + (1,))
    return np.take_along_axis(tf, idx, axis=-1)[..., 0]


def _single(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ConfigError(f"expected an H x W x K image, got shape {image.shape}")
    return image[None]


def predict_clean(net: CleanNet, image: np.ndarray) -> np.ndarray:
    """H x W x C clean-label probabilities for one image."""
    return net.probabilities(net.forward(_single(image)))[0]


def predict_transition(net: TransitionNet, image: np.ndarray, noisy: Optional[np.ndarray] = None) -> np.ndarray:
    """H x W x C x C transition field for one image.

    ``noisy`` is required in uniform-remainder mode, where rows are rebuilt
    around the observed label.
    """
    logits = net.forward(_single(image))
    return net.field(logits, None if noisy is None else np.asarray(noisy)[None])[0]
