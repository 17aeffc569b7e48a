"""Differentiable building blocks on NHWC float64 arrays.

Every forward function has a matching backward returning exact analytic
gradients. Tensors are plain ``numpy`` arrays of shape ``(n, h, w, c)``;
no autograd graph is kept, callers hold whatever cache they need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

LOG_CLAMP = 1e-12


def _check4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ConfigError(f"{name} must be 4-d (n, h, w, c), got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size convolution with zero padding.

    ``weights`` has shape ``(k, k, c_in, c_out)`` with ``k`` in {1, 3}.
    ``out[x, y, o] = bias[o] + sum_{dx, dy, i} in[x+dx, y+dy, i] * w[dx, dy, i, o]``.
    """
    _check4(x)
    k = weights.shape[0]
    if weights.ndim != 4 or k not in (1, 3) or weights.shape[1] != k:
        raise ConfigError(f"kernel must be 1x1 or 3x3, got weights of shape {weights.shape}")
    if weights.shape[2] != x.shape[3]:
        raise ConfigError(
            f"input has {x.shape[3]} channels but weights expect {weights.shape[2]}"
        )
    if bias.shape != (weights.shape[3],):
        raise ConfigError(f"bias shape {bias.shape} does not match {weights.shape[3]} outputs")
    n, h, w, _ = x.shape
    cols = _im2col(x, k)
    out = cols @ weights.reshape(-1, weights.shape[3]) + bias
    return out.reshape(n, h, w, -1)


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of :func:`conv2d_forward`."""
    _check4(x)
    _check4(upstream, "upstream gradient")
    k, _, cin, cout = weights.shape
    n, h, w, _ = x.shape
    if upstream.shape != (n, h, w, cout):
        raise ConfigError(
            f"upstream gradient shape {upstream.shape} does not match forward output "
            f"{(n, h, w, cout)}"
        )
    g = upstream.reshape(-1, cout)
    cols = _im2col(x, k)
    grad_w = (cols.T @ g).reshape(weights.shape)
    grad_b = g.sum(axis=0)
    gcols = g @ weights.reshape(-1, cout).T
    if k == 1:
        return gcols.reshape(x.shape), grad_w, grad_b
    p = k // 2
    gcols = gcols.reshape(n, h, w, k, k, cin)
    gxp = np.zeros((n, h + 2 * p, w + 2 * p, cin))
    for dy in range(k):
        for dx in range(k):
            gxp[:, dy : dy + h, dx : dx + w, :] += gcols[:, :, :, dy, dx, :]
    return gxp[:, p : p + h, p : p + w, :], grad_w, grad_b


# -- pooling, upsampling, skip concatenation ---------------------------------


def maxpool2_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling. Returns the pooled tensor and the winner index per window."""
    _check4(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(upstream: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h2, w2, c = upstream.shape
    g = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(g, idx[..., None], upstream[..., None], axis=-1)
    g = g.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return g.reshape(n, 2 * h2, 2 * w2, c)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    _check4(x)
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(upstream: np.ndarray) -> np.ndarray:
    n, h, w, c = upstream.shape
    return upstream.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check4(a)
    _check4(b)
    if a.shape[:3] != b.shape[:3]:
        raise ConfigError(f"concat needs equal (n, h, w), got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=3)


def concat_backward(upstream: np.ndarray, split: int) -> Tuple[np.ndarray, np.ndarray]:
    return upstream[..., :split], upstream[..., split:]


def pool_upsample_concat(x: np.ndarray, mode: str, other: np.ndarray | None = None) -> np.ndarray:
    """Forward-only dispatcher over ``maxpool2``, ``upsample2`` and ``concat``."""
    if mode == "maxpool2":
        return maxpool2_forward(x)[0]
    if mode == "upsample2":
        return upsample2_forward(x)
    if mode == "concat":
        if other is None:
            raise ConfigError("concat needs a second tensor")
        return concat_channels(x, other)
    raise ConfigError(f"unknown mode {mode!r}")


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


# -- normalised heads and losses ---------------------------------------------


def softmax_over_axis(x: np.ndarray, group: int) -> np.ndarray:
    """Softmax within consecutive groups of ``group`` channels of the last axis."""
    c = x.shape[-1]
    if group < 1 or c % group:
        raise ConfigError(f"{c} channels are not divisible into groups of {group}")
    z = x.reshape(*x.shape[:-1], c // group, group)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(x.shape)


def softmax_backward(prob: np.ndarray, upstream: np.ndarray, group: int) -> np.ndarray:
    """Vector-Jacobian product of :func:`softmax_over_axis` given its output."""
    shp = prob.shape
    p = prob.reshape(*shp[:-1], shp[-1] // group, group)
    g = upstream.reshape(p.shape)
    return (p * (g - (p * g).sum(axis=-1, keepdims=True))).reshape(shp)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def weighted_cross_entropy(pred: np.ndarray, weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Posterior-weighted cross entropy over the last axis.

    Returns ``-(1/N) sum_n sum_y weights[n, y] log pred[n, y]`` and the gradient
    with respect to the logits that produced ``pred`` through a softmax. ``N``
    counts all leading positions (pixels of every image in the batch).
    """
    if pred.shape != weights.shape:
        raise ConfigError(f"pred {pred.shape} and weights {weights.shape} differ")
    n = pred.size // pred.shape[-1]
    loss = -np.sum(weights * np.log(np.maximum(pred, LOG_CLAMP))) / n
    grad = (pred * weights.sum(axis=-1, keepdims=True) - weights) / n
    return loss, grad


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[labels]


# -- parameters and optimisers -----------------------------------------------


class ParamStore:
    """Named parameter arrays with same-shaped gradient accumulators.

    Iteration order is insertion order; it fixes the flat layout used for
    checkpoints and the reduction order of gradients.
    """

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grad(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.size:
            raise ConfigError(f"expected {self.size} parameters, got {values.size}")
        off = 0
        for p in self.params.values():
            p[...] = values[off : off + p.size].reshape(p.shape)
            off += p.size

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k, v in self.params.items():
            other.add(k, v.copy())
        return other


def sgd_step(store: ParamStore, lr: float) -> None:
    """``p <- p - lr * grad`` for every parameter, then zero the gradients."""
    for k, p in store.params.items():
        p -= lr * store.grads[k]
    store.zero_grad()


class Adam:
    """Adam moments kept per parameter name; ``step`` zeroes gradients like :func:`sgd_step`."""

    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.store.params.items():
            g = self.store.grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.store.zero_grad()


class SGD:
    def __init__(self, store: ParamStore):
        self.store = store

    def step(self, lr: float) -> None:
        sgd_step(self.store, lr)


def make_optimizer(name: str, store: ParamStore):
    if name == "sgd":
        return SGD(store)
    if name == "adam":
        return Adam(store)
    raise ConfigError(f"unknown optimizer {name!r}")


# -- gradient verification ---------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def finite_diff_report(
    network,
    x: np.ndarray,
    loss: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    step: float = 1e-5,
    max_per_tensor: int | None = None,
    check_input: bool = True,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``network`` exposes ``params`` (a :class:`ParamStore`), ``forward(x)`` and
    ``backward(grad_out)``; the latter accumulates parameter gradients and
    returns the gradient with respect to ``x``. ``loss`` maps the network
    output to ``(value, grad_output)`` and must not force its value to
    float64: difference quotients are evaluated in extended precision so
    round-off stays far below the truncation error of the step.

    If the network has ``activation_pattern()``, coordinates whose +/- step
    evaluations change a ReLU mask or pooling winner are not differentiable
    within the step; they are skipped and counted rather than compared.

    ``max_per_tensor`` limits the coordinates probed in each parameter tensor
    (and the input) to a random subset drawn from ``rng``.
    """
    store: ParamStore = network.params
    if store.size > 10_000:
        raise ConfigError(f"{store.size} parameters is too many for a finite-difference check")
    rng = rng if rng is not None else np.random.default_rng(0)
    pattern = getattr(network, "activation_pattern", None)

    store.zero_grad()
    _, g_out = loss(network.forward(x))
    g_in = network.backward(g_out)
    analytic = {k: store.grads[k].copy() for k in store}
    store.zero_grad()
    base = pattern() if pattern else None

    originals = dict(store.params)
    wide = {k: v.astype(np.longdouble) for k, v in originals.items()}
    xw = x.astype(np.longdouble)

    def coords(shape):
        allc = list(np.ndindex(shape))
        if max_per_tensor is None or len(allc) <= max_per_tensor:
            return allc
        pick = rng.choice(len(allc), size=max_per_tensor, replace=False)
        return [allc[i] for i in sorted(pick)]

    def same(p):
        return all(np.array_equal(a, b) for a, b in zip(base, p))

    def diff(arr, i):
        old = arr[i]
        arr[i] = old + step
        fp = loss(network.forward(xw))[0]
        smooth = pattern is None or same(pattern())
        arr[i] = old - step
        fm = loss(network.forward(xw))[0]
        smooth = smooth and (pattern is None or same(pattern()))
        arr[i] = old
        return float((fp - fm) / (2 * step)), smooth

    worst, checked, skipped = 0.0, 0, 0
    targets = [(wide[k], analytic[k]) for k in wide]
    if check_input:
        targets.append((xw, g_in))
    store.params.update(wide)
    try:
        for arr, ana in targets:
            for i in coords(arr.shape):
                num, smooth = diff(arr, i)
                if not smooth:
                    skipped += 1
                    continue
                checked += 1
                worst = max(worst, float(relative_error(ana[i], num)))
    finally:
        store.params.update(originals)
    return GradCheckReport(worst, checked, skipped)


def finite_diff_check(network, x, loss, **kwargs) -> float:
    """Max relative error of :func:`finite_diff_report`."""
    return finite_diff_report(network, x, loss, **kwargs).max_rel_error
