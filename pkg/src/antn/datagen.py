"""Synthetic circles data, morphological label noise and classical segmenters.

Class indices follow the prototype order: 0 red, 1 green, 2 blue, and the
last class (3 by default) is the white background.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError

DEFAULT_PROTOTYPES = np.array(
    [
        (200, 60, 60),
        (60, 200, 60),
        (60, 60, 200),
        (200, 200, 200),
    ],
    dtype=np.float64,
)


@dataclass
class SynthConfig:
    image_size: int = 64
    images_total: int = 55
    radius_range: Tuple[int, int] = (8, 16)
    circles_per_color: Tuple[int, int] = (2, 4)
    intensity_mean_dominant: float = 200.0
    intensity_mean_other: float = 60.0
    intensity_std: float = 50.0
    se_size: int = 5
    seed: int = 0

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.circles_per_color = tuple(self.circles_per_color)
        if self.radius_range[0] > self.radius_range[1] or self.radius_range[0] < 0:
            raise ConfigError(f"bad radius_range {self.radius_range}")
        if self.radius_range[1] >= self.image_size / 2:
            raise ConfigError("radius_max must be below image_size / 2")
        if self.se_size < 1 or self.se_size % 2 == 0:
            raise ConfigError(f"se_size must be odd, got {self.se_size}")
        lo, hi = self.circles_per_color
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad circles_per_color {self.circles_per_color}")


@dataclass
class ClassPrototypes:
    """Reference RGB triple (0..255) per class, used to name clusters."""

    rgb: np.ndarray = field(default_factory=lambda: DEFAULT_PROTOTYPES.copy())

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if len({tuple(r) for r in self.rgb}) != len(self.rgb):
            raise ConfigError("class prototypes must be pairwise distinct")

    @property
    def num_classes(self) -> int:
        return len(self.rgb)

    def nearest(self, rgb01: np.ndarray) -> np.ndarray:
        """Class of the nearest prototype for each row of ``rgb01`` (values in [0, 1])."""
        d = ((np.asarray(rgb01)[..., None, :] * 255.0 - self.rgb) ** 2).sum(axis=-1)
        return d.argmin(axis=-1)


def gen_synthetic(cfg: SynthConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Images with red, green and blue discs on a white background.

    Per image and colour, the disc count is uniform in ``circles_per_color``,
    centres uniform over the grid and radii uniform in ``radius_range``.
    Discs are painted red, then green, then blue, later ones on top. Each
    pixel's class-dominant channels are drawn from N(dominant mean, std) and
    the others from N(other mean, std), clipped to bytes and scaled to [0, 1].
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size]
    bg = 3
    dominant = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=bool)
    out = []
    for _ in range(cfg.images_total):
        labels = np.full((size, size), bg, dtype=np.int64)
        for cls in range(3):
            count = rng.integers(cfg.circles_per_color[0], cfg.circles_per_color[1] + 1)
            for _ in range(count):
                cy, cx = rng.uniform(0, size, 2)
                r = rng.uniform(cfg.radius_range[0], cfg.radius_range[1])
                labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
        mean = np.where(dominant[labels], cfg.intensity_mean_dominant, cfg.intensity_mean_other)
        img = rng.normal(mean, cfg.intensity_std)
        img = np.clip(np.rint(img), 0, 255) / 255.0
        out.append((img, labels))
    return out


# -- morphological label noise ------------------------------------------------


def _object_classes(labels: np.ndarray, background: int) -> np.ndarray:
    cls = np.unique(labels)
    return cls[cls != background]


def erode_labels(labels: np.ndarray, se_size: int = 5, background: int = 3) -> np.ndarray:
    """Object pixels survive only if their whole k x k window (clipped) shares their class."""
    if se_size % 2 == 0:
        raise ConfigError("structuring element size must be odd")
    out = np.full_like(labels, background)
    for c in _object_classes(labels, background):
        # nearest-mode padding replicates border values, i.e. clips the window
        keep = ndimage.minimum_filter(labels == c, size=se_size, mode="nearest")
        out[keep] = c
    return out


def dilate_labels(labels: np.ndarray, se_size: int = 5, background: int = 3) -> np.ndarray:
    """Pixels take the lowest object class present in their k x k window."""
    if se_size % 2 == 0:
        raise ConfigError("structuring element size must be odd")
    out = np.full_like(labels, background)
    done = np.zeros(labels.shape, dtype=bool)
    for c in _object_classes(labels, background):
        hit = ndimage.maximum_filter(labels == c, size=se_size, mode="nearest") & ~done
        out[hit] = c
        done |= hit
    return out


# -- K-Means -----------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    objective: List[float]
    iterations: int


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(points[rng.integers(len(points))])
        else:
            centers.append(points[rng.choice(len(points), p=d2 / total)])
        d2 = np.minimum(d2, ((points - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 50, tol: float = 1e-4) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    ``objective`` holds the within-cluster sum of squares after each
    assignment step. Empty clusters keep their previous centre.
    """
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, k, rng)
    history = []
    assign = np.zeros(len(points), dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), assign].sum()))
        new = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        moved = np.abs(new - centers).max()
        centers = new
        if moved < tol:
            break
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=-1)
    assign = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(points)), assign].sum()))
    return KMeansResult(centers, assign, history, it)


def kmeans_segment(
    image: np.ndarray, num_classes: int, prototypes: ClassPrototypes | None = None, seed: int = 0
) -> np.ndarray:
    """Cluster RGB triples into ``num_classes`` groups and name each by nearest prototype."""
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    prototypes = prototypes or ClassPrototypes()
    h, w, _ = image.shape
    pts = image.reshape(-1, 3)
    if np.all(pts == pts[0]):
        return np.full((h, w), prototypes.nearest(pts[0]), dtype=np.int64)
    res = kmeans(pts, num_classes, seed=seed)
    names = prototypes.nearest(res.centers)
    return names[res.assignment].reshape(h, w)


# -- multi-level Otsu ----------------------------------------------------------


def luminance_bins(image: np.ndarray) -> np.ndarray:
    lum = np.asarray(image, dtype=np.float64).mean(axis=-1)
    return np.clip(np.floor(lum * 255.0 + 0.5), 0, 255).astype(np.int64)


def _score_exact(counts: Sequence[int], sums: Sequence[int]) -> Fraction:
    return sum((Fraction(s * s, n) for n, s in zip(counts, sums) if n), Fraction(0))


def otsu_thresholds(hist: np.ndarray, num_classes: int) -> Tuple[int, ...]:
    """Thresholds ``t_1 < ... < t_{C-1}`` maximising between-class variance.

    Class ``k`` holds bins in ``(t_k, t_{k+1}]`` with ``t_0 = -1`` and
    ``t_C = L-1``. Between-class variance equals ``sum_k S_k^2 / n_k`` minus a
    constant (``S_k`` the intensity sum, ``n_k`` the count of class ``k``),
    which is what gets maximised. Candidates within float round-off of the
    best are re-scored exactly and the lexicographically lowest winner kept.
    """
    hist = np.asarray(hist, dtype=np.int64)
    levels = len(hist)
    k = num_classes - 1
    if k < 1:
        raise ConfigError("need at least 2 classes")
    cn = np.concatenate([[0], np.cumsum(hist)])
    cs = np.concatenate([[0], np.cumsum(hist * np.arange(levels))])
    cnf, csf = cn.astype(np.float64), cs.astype(np.float64)

    def part(lo, hi):
        # bins lo+1 .. hi, arrays broadcast
        n = cnf[hi + 1] - cnf[lo + 1]
        s = csf[hi + 1] - csf[lo + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(n > 0, s * s / np.where(n > 0, n, 1.0), 0.0)

    def prefix_base(prefix):
        base, prev = 0.0, -1
        for t in prefix:
            base += float(part(np.int64(prev), np.int64(t)))
            prev = t
        return base, prev

    def tail_scores(prefix):
        # vectorise over the last one or two thresholds
        base, prev = prefix_base(prefix)
        top = np.int64(levels - 1)
        if k == 1 or len(prefix) == k - 1:
            last = np.arange(prev + 1, levels - 1)
            sc = base + part(np.full_like(last, prev), last) + part(last, np.full_like(last, top))
            return last[:, None], sc
        a, b = np.meshgrid(np.arange(prev + 1, levels - 1), np.arange(prev + 1, levels - 1), indexing="ij")
        ok = a < b
        a, b = a[ok], b[ok]
        sc = base + part(np.full_like(a, prev), a) + part(a, b) + part(b, np.full_like(b, top))
        return np.stack([a, b], axis=1), sc

    free = 1 if k == 1 else 2
    prefixes = list(itertools.combinations(range(levels - 1), k - free))
    maxima = []
    for prefix in prefixes:
        _, sc = tail_scores(prefix)
        maxima.append(sc.max() if len(sc) else -np.inf)
    best = max(maxima)
    tol = 1e-12 * max(abs(best), 1.0)
    cands: List[Tuple[int, ...]] = []
    for prefix, m in zip(prefixes, maxima):
        if m >= best - tol:
            tails, sc = tail_scores(prefix)
            cands.extend(
                tuple(prefix) + tuple(int(v) for v in tails[i]) for i in np.flatnonzero(sc >= best - tol)
            )
    if len(cands) == 1:
        return cands[0]

    def exact(tup):
        bounds = (-1,) + tup + (levels - 1,)
        counts = [int(cn[b + 1] - cn[a + 1]) for a, b in zip(bounds, bounds[1:])]
        sums = [int(cs[b + 1] - cs[a + 1]) for a, b in zip(bounds, bounds[1:])]
        return _score_exact(counts, sums)

    top = max(exact(c) for c in cands)
    return min(c for c in cands if exact(c) == top)


def otsu_segment(
    image: np.ndarray, num_classes: int, prototypes: ClassPrototypes | None = None
) -> np.ndarray:
    """Multi-level Otsu on luminance; intervals are named by nearest prototype."""
    prototypes = prototypes or ClassPrototypes()
    bins = luminance_bins(image)
    hist = np.bincount(bins.ravel(), minlength=256)
    if np.count_nonzero(hist) < num_classes:
        warnings.warn(
            f"only {np.count_nonzero(hist)} distinct luminance levels for {num_classes} classes; "
            "empty intervals are merged into their neighbours",
            RuntimeWarning,
            stacklevel=2,
        )
    th = otsu_thresholds(hist, num_classes)
    interval = np.searchsorted(np.asarray(th), bins, side="left")
    out = np.empty(bins.shape, dtype=np.int64)
    for j in np.unique(interval):
        sel = interval == j
        out[sel] = prototypes.nearest(image[sel].mean(axis=0))
    return out


# -- Reinhard colour transfer in l-alpha-beta ----------------------------------

_RGB2LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
_LMS2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64
)
# offset keeps the log finite for black pixels and is undone exactly
_LOG_OFFSET = 1.0 / 255.0


def rgb_to_lab_reinhard(rgb: np.ndarray) -> np.ndarray:
    lms = np.asarray(rgb, dtype=np.float64) @ _RGB2LMS.T
    return np.log10(np.maximum(lms, 0.0) + _LOG_OFFSET) @ _LMS2LAB.T


def lab_reinhard_to_rgb(lab: np.ndarray) -> np.ndarray:
    lms = 10.0 ** (lab @ np.linalg.inv(_LMS2LAB).T) - _LOG_OFFSET
    return lms @ np.linalg.inv(_RGB2LMS).T


def reinhard_transfer(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Match per-channel l-alpha-beta mean and std of ``source`` to ``reference``, unclamped."""
    src = rgb_to_lab_reinhard(source)
    ref = rgb_to_lab_reinhard(reference)
    axes = tuple(range(src.ndim - 1))
    mu_s, sd_s = src.mean(axis=axes), src.std(axis=axes)
    mu_r, sd_r = ref.mean(axis=axes), ref.std(axis=axes)
    # round-off leaves a ~1e-17 std on constant channels; treat that as flat
    flat = sd_s <= 1e-12 * np.maximum(np.abs(mu_s), 1.0)
    scale = np.where(flat, 1.0, sd_r / np.where(flat, 1.0, sd_s))
    return lab_reinhard_to_rgb((src - mu_s) * scale + mu_r)


def reinhard_normalize(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Stain-normalise ``source`` towards ``reference``; both RGB in [0, 1]."""
    return np.clip(reinhard_transfer(source, reference), 0.0, 1.0)
