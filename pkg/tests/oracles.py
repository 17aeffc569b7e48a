"""Straight-line reference implementations used as test oracles."""

import itertools
from fractions import Fraction

import numpy as np


def otsu_brute_force(hist, num_classes):
    """Exhaustive exact search: maximise sum_k S_k^2 / n_k, lowest tuple on ties.

    Classes are the bin intervals (t_k, t_{k+1}] with t_0 = -1, t_C = L-1.
    """
    hist = [int(h) for h in hist]
    levels = len(hist)
    best, arg = None, None
    for tup in itertools.combinations(range(levels - 1), num_classes - 1):
        bounds = (-1,) + tup + (levels - 1,)
        score = Fraction(0)
        for a, b in zip(bounds, bounds[1:]):
            n = sum(hist[a + 1 : b + 1])
            s = sum(i * hist[i] for i in range(a + 1, b + 1))
            if n:
                score += Fraction(s * s, n)
        if best is None or score > best:
            best, arg = score, tup
    return arg


def posterior_brute_force(prior, *columns):
    """Bayes rule written out per pixel and per class with Python floats."""
    prior = np.asarray(prior)
    out = np.empty_like(prior)
    for n in range(prior.shape[0]):
        terms = []
        for y in range(prior.shape[1]):
            t = prior[n, y]
            for col in columns:
                t = t * col[n, y]
            terms.append(t)
        total = sum(terms)
        for y in range(prior.shape[1]):
            out[n, y] = terms[y] / total
    return out


def erode_brute_force(labels, k, background=3):
    h, w = labels.shape
    r = k // 2
    out = np.full_like(labels, background)
    for i in range(h):
        for j in range(w):
            c = labels[i, j]
            if c == background:
                continue
            win = labels[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            if np.all(win == c):
                out[i, j] = c
    return out


def dilate_brute_force(labels, k, background=3):
    h, w = labels.shape
    r = k // 2
    out = np.full_like(labels, background)
    for i in range(h):
        for j in range(w):
            win = labels[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            objs = win[win != background]
            if objs.size:
                out[i, j] = objs.min()
    return out
