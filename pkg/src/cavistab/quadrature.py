"""Shared quadrature helpers: 1D Gauss-Legendre panels and simplex rules.

Sums are accumulated with numpy's pairwise summation over fixed-shape arrays,
which is deterministic for a fixed node layout.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def gauss_legendre(n: int):
    """Nodes and weights on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def gl_panel(a: float, b: float, n: int):
    """Gauss-Legendre nodes/weights on [a, b]."""
    x, w = gauss_legendre(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def gl_panels(edges, n: int):
    """Composite Gauss-Legendre rule over consecutive intervals in `edges`."""
    edges = np.asarray(edges, dtype=float)
    x, w = gauss_legendre(n)
    mids = 0.5 * (edges[:-1] + edges[1:])
    halfs = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mids[:, None] + halfs[:, None] * x[None, :]).ravel()
    weights = (halfs[:, None] * w[None, :]).ravel()
    return nodes, weights


def uniform_panel_edges(a: float, b: float, n_panels: int):
    return np.linspace(a, b, n_panels + 1)


def log_panel_edges(a: float, b: float, per_octave: int = 1, breakpoints=()):
    """Octave-spaced panel edges on [a, b] (a > 0), split at given breakpoints."""
    if a <= 0 or b <= a:
        raise ValueError("log panels need 0 < a < b")
    n_oct = max(1, int(math.ceil(math.log2(b / a) * per_octave)))
    edges = a * (b / a) ** (np.arange(n_oct + 1) / n_oct)
    extra = [t for t in breakpoints if a < t < b]
    if extra:
        edges = np.unique(np.concatenate([edges, np.asarray(extra, dtype=float)]))
    edges[0], edges[-1] = a, b
    return edges


# Degree-4 simplex rule (Grundmann-Moller, s=2), used as the independent
# verification route against the exact reference-tensor assembly.
@lru_cache(maxsize=8)
def grundmann_moller_tet(s: int = 2):
    """Barycentric points/weights on the reference tetrahedron, degree 2s+1.

    Weights sum to 1 (reference measure normalized); some weights are negative.
    """
    n = 3
    d = 2 * s + 1
    pts = []
    wts = []
    for i in range(s + 1):
        w = (-1.0) ** i * 2.0 ** (-2 * s) * (d + n - 2 * i) ** d / (
            math.factorial(i) * math.factorial(d + n - i)
        )
        # all nonnegative integer 4-tuples k with sum = s - i
        m = s - i
        for k0 in range(m + 1):
            for k1 in range(m - k0 + 1):
                for k2 in range(m - k0 - k1 + 1):
                    k3 = m - k0 - k1 - k2
                    bary = np.array(
                        [(2 * k0 + 1), (2 * k1 + 1), (2 * k2 + 1), (2 * k3 + 1)],
                        dtype=float,
                    ) / (d + n - 2 * i)
                    pts.append(bary)
                    wts.append(w)
    pts = np.array(pts)
    wts = np.array(wts)
    wts *= math.factorial(n) / wts.sum() / math.factorial(n)  # normalize: sum -> 1
    wts /= wts.sum()
    return pts, wts


@lru_cache(maxsize=8)
def tet_rule_degree2():
    """Classical 4-point degree-2 rule on the reference tetrahedron (weights sum 1)."""
    a = (5.0 + 3.0 * math.sqrt(5.0)) / 20.0
    b = (5.0 - math.sqrt(5.0)) / 20.0
    pts = np.full((4, 4), b)
    np.fill_diagonal(pts, a)
    wts = np.full(4, 0.25)
    return pts, wts
