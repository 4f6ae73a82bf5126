"""Small Gauss-Legendre panel quadrature helpers shared across modules."""

from __future__ import annotations

import numpy as np

# cache of (nodes, weights) per order on [-1, 1]
_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gl_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    rule = _GL_CACHE.get(order)
    if rule is None:
        rule = np.polynomial.legendre.leggauss(order)
        _GL_CACHE[order] = rule
    return rule


def panel_nodes(edges: np.ndarray, order: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights for the panels defined by `edges`.

    Returns flat arrays (nodes, weights); sum(f(nodes) * weights) approximates
    the integral over [edges[0], edges[-1]].
    """
    xs, ws = gl_rule(order)
    edges = np.asarray(edges, dtype=float)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (0.5 * (hi + lo) + half * xs[None, :]).ravel()
    weights = (half * ws[None, :]).ravel()
    return nodes, weights


def split_edges(edges: np.ndarray) -> np.ndarray:
    """Insert the midpoint of every panel (used for convergence doubling)."""
    edges = np.asarray(edges, dtype=float)
    mids = 0.5 * (edges[:-1] + edges[1:])
    out = np.empty(edges.size + mids.size)
    out[0::2] = edges
    out[1::2] = mids
    return out


def adaptive_panels(f, edges, rel_tol=1e-9, abs_floor=0.0, order=16, max_doublings=10):
    """Integrate a vectorized callable over a panel ladder, doubling panels
    until the result changes by less than rel_tol (relative, with an absolute
    floor for near-zero integrals).

    Raises RuntimeError carrying the partial value if the doubling budget is
    exhausted without convergence.
    """
    edges = np.asarray(edges, dtype=float)
    nodes, weights = panel_nodes(edges, order)
    val = float(np.dot(f(nodes), weights))
    for _ in range(max_doublings):
        edges = split_edges(edges)
        nodes, weights = panel_nodes(edges, order)
        new = float(np.dot(f(nodes), weights))
        if abs(new - val) <= rel_tol * max(abs(new), abs_floor):
            return new
        val = new
    raise RuntimeError(
        f"panel quadrature did not converge after {max_doublings} doublings; "
        f"partial value {val!r}"
    )


def geometric_edges(inner: float, outer: float, ratio: float = 2.0) -> np.ndarray:
    """Panel edges [0, inner, inner*ratio, ..., >= outer]."""
    if outer <= inner:
        return np.array([0.0, outer])
    n = int(np.ceil(np.log(outer / inner) / np.log(ratio)))
    ladder = inner * ratio ** np.arange(n + 1)
    ladder[-1] = outer
    return np.concatenate(([0.0], ladder))
