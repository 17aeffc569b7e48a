"""Evaluation quantities: accuracy, cross entropy, clean/noisy ratios,
transition matrices and the unsupervised uniformity/disparity score."""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
from skimage.color import rgb2lab

from .errors import DataError
from .numerics import LOG_CLAMP

RATIO_INF = float("inf")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise DataError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    _same_shape(pred, truth)
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


def cross_entropy_curve(pred: np.ndarray, reference: np.ndarray) -> float:
    """``-(1/N) sum_n log pred[n, reference_n]`` with the log clamped."""
    pred = np.asarray(pred)
    reference = np.asarray(reference)
    _same_shape(pred.shape[:-1], reference.shape)
    picked = np.take_along_axis(pred, reference[..., None], axis=-1)[..., 0]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def clean_noisy_ratio(posterior: np.ndarray, noisy: np.ndarray) -> float:
    """Pixels whose posterior argmax equals the noisy label, over those where it differs.

    Returns ``inf`` when every pixel agrees.
    """
    posterior = np.asarray(posterior)
    _same_shape(posterior.shape[:-1], np.shape(noisy))
    agree = int(np.count_nonzero(posterior.argmax(axis=-1) == noisy))
    differ = int(np.size(noisy)) - agree
    return RATIO_INF if differ == 0 else agree / differ


def label_agreement_ratio(clean: np.ndarray, noisy: np.ndarray) -> float:
    """The same ratio computed from ground-truth labels instead of a posterior."""
    _same_shape(clean, noisy)
    agree = int(np.count_nonzero(np.asarray(clean) == noisy))
    differ = int(np.size(noisy)) - agree
    return RATIO_INF if differ == 0 else agree / differ


def expected_transition(clean, noisy, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ``E[y, k] = #(clean=y, noisy=k) / #(clean=y)``.

    ``clean`` and ``noisy`` may be single label maps or sequences of them.
    Returns the matrix and a boolean mask of defined rows; undefined rows
    (class absent from ``clean``) are NaN.
    """
    clean = np.concatenate([np.ravel(c) for c in _as_list(clean)])
    noisy = np.concatenate([np.ravel(n) for n in _as_list(noisy)])
    _same_shape(clean, noisy)
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (clean, noisy), 1.0)
    rows = counts.sum(axis=1)
    defined = rows > 0
    mat = np.full_like(counts, np.nan)
    mat[defined] = counts[defined] / rows[defined, None]
    return mat, defined


def _as_list(x) -> list:
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [x]
    return list(x)


def average_transition_fields(fields: Iterable[np.ndarray]) -> np.ndarray:
    """Mean over every pixel of every ``H x W x C x C`` field."""
    total, count = None, 0
    for f in fields:
        flat = f.reshape(-1, f.shape[-2], f.shape[-1])
        s = flat.sum(axis=0)
        total = s if total is None else total + s
        count += flat.shape[0]
    if total is None:
        raise DataError("no transition fields to average")
    return total / count


def average_transition(model, images: Sequence[np.ndarray], noisy: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Pixel-wise average of a transition network's output over ``images``.

    Uniform-remainder models need the observed ``noisy`` labels to rebuild rows.
    """
    from .segnets import predict_transition

    if noisy is None:
        noisy = [None] * len(images)
    return average_transition_fields(predict_transition(model, img, nz) for img, nz in zip(images, noisy))


def frobenius_distance(a: np.ndarray, b: np.ndarray, rows: Optional[np.ndarray] = None) -> float:
    """Frobenius norm of ``a - b`` restricted to ``rows`` (defaults to all)."""
    d = np.asarray(a) - np.asarray(b)
    if rows is not None:
        d = d[rows]
    return float(np.sqrt(np.sum(d * d)))


def uniformity_disparity(image: np.ndarray, seg: np.ndarray) -> float:
    """Within-segment CIELAB scatter over between-segment mean separation.

    ``U = sum_c (n_c/N) mean_{n in c} ||lab_n - mu_c||`` and
    ``D = sum_{c<c'} n_c n_c' ||mu_c - mu_c'|| / sum_{c<c'} n_c n_c'``.
    Returns ``U / D`` (lower is better), ``inf`` when ``D == 0``. Raises
    :class:`DataError` with fewer than two non-empty segments.
    """
    seg = np.asarray(seg)
    _same_shape(np.shape(image)[:-1], seg.shape)
    lab = rgb2lab(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)).reshape(-1, 3)
    seg = seg.ravel()
    classes = np.unique(seg)
    if len(classes) < 2:
        raise DataError("uniformity/disparity needs at least two non-empty segments")
    n_total = seg.size
    mus, ns = [], []
    u = 0.0
    for c in classes:
        pts = lab[seg == c]
        mu = pts.mean(axis=0)
        mus.append(mu)
        ns.append(len(pts))
        u += (len(pts) / n_total) * np.linalg.norm(pts - mu, axis=1).mean()
    num = den = 0.0
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            w = ns[i] * ns[j]
            num += w * np.linalg.norm(mus[i] - mus[j])
            den += w
    d = num / den
    if d == 0:
        return RATIO_INF
    return float(u / d)


def transition_heatmap(matrix: np.ndarray) -> np.ndarray:
    """8-bit grey levels ``round(255 p)``; undefined (NaN) entries map to 0."""
    m = np.nan_to_num(np.asarray(matrix, dtype=np.float64), nan=0.0)
    return np.clip(np.rint(255.0 * m), 0, 255).astype(np.uint8)
