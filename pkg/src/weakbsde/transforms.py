"""Convex envelope and Fenchel conjugates of loss maps and drivers."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .problem import Driver, LossMap

CONVEX_TOL = 1e-12


def lower_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the lower convex hull of points sorted by ``x`` (monotone chain).

    Collinear interior points are dropped, so consecutive hull slopes are
    strictly increasing.
    """
    idx: list[int] = []
    for i in range(x.size):
        while len(idx) >= 2:
            a, b = idx[-2], idx[-1]
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross <= 0.0:
                idx.pop()
            else:
                break
        idx.append(i)
    return np.array(idx, dtype=int)


@dataclass(frozen=True)
class EnvelopeResult:
    """Convex envelope of Phi on its knot set.

    ``hull_m``/``hull_v`` are the vertices of the lower hull; every vertex is a
    point of the graph of Phi.  ``contact_set`` indexes the (distinct) knots
    where the envelope touches Phi.
    """

    knots_m: np.ndarray
    knots_v: np.ndarray
    hat_phi_grid: np.ndarray
    contact_set: np.ndarray
    hull_m: np.ndarray
    hull_v: np.ndarray

    def __call__(self, m) -> np.ndarray:
        return np.interp(np.asarray(m, dtype=float), self.hull_m, self.hull_v)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.hull_v) / np.diff(self.hull_m)

    def mixing(self, m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Two-point decomposition ``(p_lo, p_hi, eps)`` with
        ``eps p_lo + (1 - eps) p_hi = m`` and ``hat_phi(m) = eps Phi(p_lo) + (1 - eps) Phi(p_hi)``.
        """
        m = np.atleast_1d(np.asarray(m, dtype=float))
        j = np.clip(np.searchsorted(self.hull_m, m, side="right") - 1, 0, self.hull_m.size - 2)
        lo, hi = self.hull_m[j], self.hull_m[j + 1]
        eps = (hi - m) / (hi - lo)
        at_vertex = np.isclose(m, lo, rtol=0, atol=1e-15) | np.isclose(m, hi, rtol=0, atol=1e-15)
        lo = np.where(at_vertex, m, lo)
        hi = np.where(at_vertex, m, hi)
        eps = np.where(at_vertex, 1.0, eps)
        return lo, hi, eps


def convex_envelope(loss: LossMap) -> EnvelopeResult:
    """Largest convex minorant of Phi, exact for piecewise-linear Phi."""
    m, v = loss.knots
    idx = lower_hull(m, v)
    hull_m, hull_v = m[idx], v[idx]
    hat = np.interp(m, hull_m, hull_v)
    contact = np.flatnonzero(np.abs(hat - v) <= 1e-12 * np.maximum(1.0, np.abs(v)))
    return EnvelopeResult(m, v, hat, contact, hull_m, hull_v)


def envelope_loss(loss: LossMap) -> LossMap:
    """The loss map whose Phi is the convex envelope of ``loss``'s Phi."""
    env = convex_envelope(loss)
    return LossMap.from_phi(env.hull_m, env.hull_v, kind="custom_grid", random_factor=loss.random_factor)


def hull_envelope_bruteforce(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """O(n^2)-per-point envelope: minimum over all chords spanning each knot."""
    out = np.empty_like(v)
    for k in range(m.size):
        i = np.arange(0, k + 1)[:, None]
        j = np.arange(k, m.size)[None, :]
        span = m[j] - m[i]
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(span > 0, (m[k] - m[i]) / np.where(span > 0, span, 1.0), 0.0)
        chord = v[i] + w * (v[j] - v[i])
        out[k] = chord.min()
    return out


@dataclass(frozen=True)
class ConjugateLoss:
    """Fenchel transform ``Phi~(l) = sup_{m in [0,1]} (m l - Phi(m))``.

    The transform of a piecewise-linear Phi is piecewise linear in ``l`` with
    breakpoints at the hull slopes, so ``value``/``grad`` are exact everywhere
    (they extend to ``-Phi(0)`` below and ``l - Phi(1)`` above the table).
    """

    l_grid: np.ndarray
    tilde_phi: np.ndarray
    gradient: np.ndarray
    hull_m: np.ndarray
    hull_v: np.ndarray
    slopes: np.ndarray

    def _vertex(self, l) -> np.ndarray:
        # number of hull slopes strictly below l: ties go to the smallest maximizer
        return np.searchsorted(self.slopes, l, side="left")

    def value(self, l) -> np.ndarray:
        l = np.asarray(l, dtype=float)
        j = self._vertex(l)
        return self.hull_m[j] * l - self.hull_v[j]

    def grad(self, l) -> np.ndarray:
        return self.hull_m[self._vertex(np.asarray(l, dtype=float))]

    def value_scaled(self, l, xi) -> np.ndarray:
        """Transform of ``m -> xi Phi(m)`` at ``l`` (``xi >= 0`` per path)."""
        l = np.asarray(l, dtype=float)
        xi = np.asarray(xi, dtype=float)
        pos = xi > 0
        safe = np.where(pos, xi, 1.0)
        return np.where(pos, xi * self.value(l / safe), np.maximum(l, 0.0))

    def grad_scaled(self, l, xi) -> np.ndarray:
        l = np.asarray(l, dtype=float)
        xi = np.asarray(xi, dtype=float)
        pos = xi > 0
        safe = np.where(pos, xi, 1.0)
        return np.where(pos, self.grad(l / safe), np.where(l > 0, 1.0, 0.0))


def default_l_grid(n: int = 200) -> np.ndarray:
    return np.logspace(-4, 4, n)


def fenchel_loss(loss: LossMap, l_grid=None) -> ConjugateLoss:
    """Tabulate Phi~ and its smallest-argmax gradient on ``l_grid``."""
    l_grid = default_l_grid() if l_grid is None else np.asarray(l_grid, dtype=float)
    if np.any(~np.isfinite(l_grid)):
        raise ValueError("l_grid must be finite")
    env = convex_envelope(loss)
    slopes = env.slopes
    proto = ConjugateLoss(l_grid, np.empty(0), np.empty(0), env.hull_m, env.hull_v, slopes)
    return ConjugateLoss(l_grid, proto.value(l_grid), proto.grad(l_grid), env.hull_m, env.hull_v, slopes)


def biconjugate(conj: ConjugateLoss, m) -> np.ndarray:
    """``sup_l (m l - Phi~(l))`` over the tabulated ``l`` values."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    return np.max(m[:, None] * conj.l_grid[None, :] - conj.tilde_phi[None, :], axis=1)


# ---------------------------------------------------------------------------
# driver conjugate

LATTICE_HALF_WIDTH = 10.0
LATTICE_POINTS = 401


def fenchel_driver(driver: Driver, t: float, uv) -> float:
    """``g~(t, u, v) = sup_{y, z} (y u + z.v - g(t, y, z))``.

    Returns ``+inf`` outside ``[-K_g, K_g]^{d+1}`` and outside the declared dual
    box.  Linear drivers give the indicator of ``{(A_Y, A_Z)}`` shifted by
    ``-g(t, 0, 0)``; drivers without a closed-form conjugate are maximized over a
    bounded (y, z) lattice, which is only an approximation.
    """
    uv = np.atleast_1d(np.asarray(uv, dtype=float))
    u, v = float(uv[0]), uv[1:]
    K = driver.K_g
    tol = 1e-12
    if np.any(np.abs(uv) > K + tol):
        return np.inf
    if driver.dual_lo is not None:
        if np.any(uv < driver.dual_lo - tol) or np.any(uv > driver.dual_hi + tol):
            return np.inf
    if driver.is_linear:
        a = np.concatenate([[driver.a_y], driver.a_z])
        return -driver.g0 if np.allclose(uv, a, rtol=0, atol=1e-12) else np.inf
    if driver.conjugate is not None:
        return float(driver.conjugate(t, u, v))
    warnings.warn("lattice conjugate of a custom driver is an approximation; finite only "
                  "for (u, v) in [-K_g, K_g]^{d+1}", RuntimeWarning, stacklevel=2)
    axis = np.linspace(-LATTICE_HALF_WIDTH, LATTICE_HALF_WIDTH, LATTICE_POINTS)
    d = v.size
    best = -np.inf
    zs = np.array(list(itertools.product(axis, repeat=d))) if d > 1 else axis[:, None]
    for y in axis:
        yy = np.full(zs.shape[0], y)
        val = y * u + zs @ v - driver(t, yy, zs)
        best = max(best, float(val.max()))
    return best
