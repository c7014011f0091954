"""Independent reference values.

* closed-form quantile-hedging price under a Girsanov density, with a
  quadrature cross-check;
* the exact minimum of ``sum q_i Phi(M_i)`` over ``sum p_i M_i = m`` on a finite
  binary tree (a fractional knapsack for convex piecewise-linear Phi), with a
  grid-search oracle;
* a stability probe that perturbs terminal data and compares the response with
  the Gronwall envelope.

None of these share code paths with the Monte Carlo solvers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .gexpect import BinomialLattice, g_expectation, gexp_tree, tree_linear_response
from .problem import LossMap, ProblemSpec
from .simulate import PathEnsemble

GRONWALL_C = 8.0


# ---------------------------------------------------------------------------
# quantile hedging under a Girsanov density


def np_quantile_price(theta: float, T: float, m: float) -> float:
    """``inf E^Q[M_T]`` over ``[0, 1]``-valued ``M_T`` with ``E^P[M_T] = m``.

    With ``dQ/dP = exp(-theta W_T - theta^2 T / 2)`` the optimal ``M_T`` is the
    indicator of the set of probability ``m`` where the density is smallest,
    which gives ``N(N^{-1}(m) - |theta| sqrt(T))``.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError("m must lie in [0, 1]")
    if m == 0.0:
        return 0.0
    if m == 1.0:
        return 1.0
    return float(norm.cdf(norm.ppf(m) - abs(theta) * np.sqrt(T)))


def np_quantile_quadrature(theta: float, T: float, m: float, n_sub: int = 200_000, order: int = 5) -> float:
    """Same quantity by composite Gauss-Legendre quadrature of the Q-probability of the
    rejection region (``order * n_sub`` nodes, default 10^6)."""
    if m <= 0.0:
        return 0.0
    if m >= 1.0:
        return 1.0
    a = abs(theta) * np.sqrt(T)
    # in standardized units x = W_T / sqrt(T) the cheap set is {x > N^{-1}(1 - m)}
    lo = norm.ppf(1.0 - m)
    lo = max(lo, -14.0 - a)
    hi = 14.0 + a
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, n_sub + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    dens = np.exp(-0.5 * x * x - a * x - 0.5 * a * a) / np.sqrt(2.0 * np.pi)
    return float(np.sum(w * dens))


# ---------------------------------------------------------------------------
# finite trees


@dataclass(frozen=True)
class TreeInstance:
    """Binary tree with per-node up-probabilities and per-leaf pricing weights.

    ``up_prob`` lists the internal nodes in level order; ``weights`` are the
    leaf deflators, so the objective is ``sum_i p_i w_i Phi(M_i)``.
    """

    depth: int
    up_prob: np.ndarray
    weights: np.ndarray
    loss: LossMap
    m: float

    def __post_init__(self):
        if not 0 <= self.depth <= 12:
            raise ValueError("tree depth must lie in 0..12")
        up = np.asarray(self.up_prob, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if up.shape != (2 ** self.depth - 1,):
            raise ValueError("need one up-probability per internal node")
        if w.shape != (2 ** self.depth,):
            raise ValueError("need one weight per leaf")
        if np.any((up <= 0) | (up >= 1)):
            raise ValueError("branch probabilities must lie in (0, 1)")
        if np.any(w <= 0):
            raise ValueError("leaf weights must be positive")
        object.__setattr__(self, "up_prob", up)
        object.__setattr__(self, "weights", w)

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth

    @property
    def leaf_prob(self) -> np.ndarray:
        p = np.ones(1)
        start = 0
        for level in range(self.depth):
            up = self.up_prob[start:start + 2 ** level]
            p = np.column_stack([p * (1 - up), p * up]).ravel()
            start += 2 ** level
        return p

    @property
    def pricing(self) -> np.ndarray:
        return self.leaf_prob * self.weights

    def objective(self, M) -> float:
        return float(np.sum(self.pricing * self.loss.phi(np.asarray(M, dtype=float))))

    @classmethod
    def from_lattice(cls, lattice: BinomialLattice, a_y: float, a_z: float, loss: LossMap,
                     m: float) -> "TreeInstance":
        """Tree of a linear driver ``g = a_y y + a_z z`` on a (non-recombining) lattice.

        The leaf weight is the product over the path of ``(1 + a_z dW) / (1 - a_y dt)``,
        the discrete deflator of the implicit tree recursion.
        """
        n = lattice.depth
        bits = (np.arange(2 ** n)[:, None] >> np.arange(n)[::-1]) & 1
        dW = np.where(bits == 1, lattice.up, lattice.down)
        w = np.prod((1.0 + a_z * dW) / (1.0 - a_y * lattice.dt), axis=1)
        return cls(n, np.full(2 ** n - 1, lattice.p), w, loss, m)


def random_convex_loss(rng: np.random.Generator, n_pieces: Optional[int] = None) -> LossMap:
    """Non-decreasing convex piecewise-linear Phi on [0, 1] valued in [0, 1]."""
    k = int(n_pieces or rng.integers(1, 5))
    inner = np.sort(rng.uniform(0.05, 0.95, size=k - 1))
    x = np.concatenate([[0.0], inner, [1.0]])
    slopes = np.sort(rng.uniform(0.0, 1.0, size=k))
    v = np.concatenate([[0.0], np.cumsum(slopes * np.diff(x))])
    v0 = rng.uniform(0.0, 0.2)
    v = v0 + (1.0 - v0) * v / max(v[-1], 1e-12) * rng.uniform(0.5, 1.0)
    return LossMap.from_phi(x, v)


def random_tree(rng: np.random.Generator, depth: Optional[int] = None) -> TreeInstance:
    depth = int(depth if depth is not None else rng.integers(1, 5))
    up = rng.uniform(0.2, 0.8, size=2 ** depth - 1)
    w = np.exp(rng.normal(0.0, 0.4, size=2 ** depth))
    return TreeInstance(depth, up, w, random_convex_loss(rng), float(rng.uniform(0.05, 0.95)))


def _convex_pieces(loss: LossMap) -> tuple[np.ndarray, np.ndarray]:
    x, v = loss.knots
    s = np.diff(v) / np.diff(x)
    if np.any(np.diff(s) < -1e-12 * np.maximum(1.0, np.abs(s[1:]))):
        raise ValueError("exact tree solver needs a convex piecewise-linear Phi")
    return x, v


def tree_primal_exact(tree: TreeInstance) -> tuple[float, np.ndarray]:
    """Exact ``min sum q_i Phi(M_i)`` subject to ``sum p_i M_i = m``, ``M_i`` in [0, 1].

    Each (leaf, linear piece) pair is an item that raises the constraint by
    ``p_i * width`` at cost ``q_i * slope * width``; items are taken in order
    of cost per unit of constraint and the last one is split.  Convexity makes
    every leaf consume its pieces in order.
    """
    m = float(tree.m)
    if not 0.0 <= m <= 1.0:
        raise ValueError("m must lie in [0, 1]")
    x, v = _convex_pieces(tree.loss)
    p, q = tree.leaf_prob, tree.pricing
    widths = np.diff(x)
    slopes = np.diff(v) / widths
    leaf, piece = np.meshgrid(np.arange(p.size), np.arange(widths.size), indexing="ij")
    leaf, piece = leaf.ravel(), piece.ravel()
    ratio = q[leaf] * slopes[piece] / p[leaf]
    order = np.lexsort((piece, leaf, ratio))
    M = np.zeros(p.size)
    need = m
    for j in order:
        if need <= 0.0:
            break
        i, k = leaf[j], piece[j]
        cap = p[i] * widths[k]
        take = min(cap, need)
        M[i] += take / p[i]
        need -= take
    M = np.clip(M, 0.0, 1.0)
    return float(np.sum(q * np.interp(M, x, v))), M


def tree_primal_bruteforce(tree: TreeInstance, grid: int = 50, units: int = 20_000) -> tuple[float, np.ndarray]:
    """Minimum of the objective over ``M`` in ``{0, 1/grid, ..., 1}^leaves`` with
    ``|sum p_i M_i - m| <= 1/grid``.

    Dynamic programming over leaves with the constraint counted in integer
    units; the acceptance window is shrunk by the worst-case rounding so that
    every accepted vector satisfies the constraint exactly.
    """
    p, q = tree.leaf_prob, tree.pricing
    N = p.size
    levels = np.arange(grid + 1) / grid
    cost_levels = tree.loss.phi(levels)
    size = units + N + 1
    INF = np.inf
    best = np.full(size, INF)
    best[0] = 0.0
    choice = np.zeros((N, size), dtype=np.int16)
    for i in range(N):
        step = np.rint(p[i] * levels * units).astype(int)
        cost = q[i] * cost_levels
        new = np.full(size, INF)
        pick = np.zeros(size, dtype=np.int16)
        for k in range(grid + 1):
            s = step[k]
            cand = np.full(size, INF)
            cand[s:] = best[:size - s] + cost[k]
            better = cand < new
            new[better] = cand[better]
            pick[better] = k
        best = new
        choice[i] = pick
    tol = 1.0 / grid - N * 0.5 / units
    c = np.arange(size)
    ok = np.abs(c / units - tree.m) <= tol
    if not np.any(ok & np.isfinite(best)):
        raise ValueError("no grid point satisfies the constraint")
    vals = np.where(ok, best, INF)
    c_star = int(np.argmin(vals))
    M = np.empty(N)
    for i in range(N - 1, -1, -1):
        k = int(choice[i, c_star])
        M[i] = levels[k]
        c_star -= int(np.rint(p[i] * levels[k] * units))
    return float(vals.min()), M


def tree_primal_enumerate(tree: TreeInstance, grid: int = 10) -> float:
    """Literal enumeration of the grid-search oracle (small trees only)."""
    p, q = tree.leaf_prob, tree.pricing
    if (grid + 1) ** p.size > 5_000_000:
        raise ValueError("tree too large for enumeration")
    levels = np.arange(grid + 1) / grid
    costs = tree.loss.phi(levels)
    best = np.inf
    for combo in itertools.product(range(grid + 1), repeat=p.size):
        idx = np.array(combo)
        if abs(np.dot(p, levels[idx]) - tree.m) <= 1.0 / grid:
            best = min(best, float(np.dot(q, costs[idx])))
    return best


# ---------------------------------------------------------------------------
# stability


@dataclass(frozen=True)
class StabilityRow:
    delta: float
    err_shift: float
    err_noise: float
    envelope: float
    linear_expected: Optional[float]


@dataclass
class StabilityReport:
    rows: list
    backend: str
    C: float
    linear_tol: float = 1e-10
    notes: list = field(default_factory=list)

    @property
    def within_envelope(self) -> bool:
        return all(r.err_shift <= r.envelope * (1 + 1e-12) and r.err_noise <= r.envelope * (1 + 1e-12)
                   for r in self.rows)

    @property
    def monotone(self) -> bool:
        ordered = sorted(self.rows, key=lambda r: r.delta)
        errs = [r.err_shift for r in ordered]
        return all(a <= b * (1 + 1e-12) + 1e-15 for a, b in zip(errs[:-1], errs[1:]))

    @property
    def linear_exact(self) -> Optional[bool]:
        if any(r.linear_expected is None for r in self.rows):
            return None
        return all(abs(r.err_shift - r.linear_expected) <= self.linear_tol for r in self.rows)

    def check(self):
        if not self.within_envelope:
            raise AssertionError("stability envelope exceeded")
        if not self.monotone:
            raise AssertionError("output error does not shrink with the perturbation")
        if self.linear_exact is False:
            raise AssertionError("linear response violated")


def _noise(seed: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0x5747], dtype=np.uint64)))
    return gen.uniform(-1.0, 1.0, size=n)


def stability_probe(spec: ProblemSpec, deltas: Sequence[float], ens: Optional[PathEnsemble] = None,
                    lattice: Optional[BinomialLattice] = None, terminal=None,
                    noise_seed: int = 7) -> StabilityReport:
    """Perturb the terminal data by ``+delta`` and by uniform noise in ``[-delta, delta]``.

    Uses the exact tree recursion when ``lattice`` is given, the ensemble
    otherwise.  The envelope is ``sqrt(C) delta`` with ``C = exp(8 K_g T)``; on
    linear drivers the additive response is also compared with its exact
    value (the tree's discount factor, or ``E[L_T] delta`` on an ensemble).
    """
    deltas = [float(dl) for dl in deltas]
    if any(dl < 0 for dl in deltas):
        raise ValueError("deltas must be non-negative")
    drv = spec.driver
    C = float(np.exp(GRONWALL_C * drv.K_g * spec.T))
    if lattice is not None:
        W = lattice.terminal_W()
        base = spec.loss.phi(0.5 + 0.5 * np.tanh(W)) if terminal is None else np.asarray(terminal, float)

        def solve(x):
            return gexp_tree(lattice, x, drv).Y0

        factor = tree_linear_response(lattice, drv.a_y) if drv.is_linear else None
        backend = "tree"
    else:
        if ens is None:
            raise ValueError("an ensemble or a lattice is required")
        base = ens.xi * spec.loss.phi(0.5 + 0.5 * np.tanh(ens.W_T[:, 0])) if terminal is None \
            else np.asarray(terminal, float)

        def solve(x):
            return g_expectation(ens, x, drv, n_batches=1).Y0

        factor = None
        if drv.is_linear:
            from .simulate import deflator_for
            factor = float(deflator_for(ens, drv)[:, -1].mean())
        backend = "linear_closed_form" if drv.is_linear else "lsmc"
    y0 = solve(base)
    U = _noise(noise_seed, base.size)
    rows = []
    for dl in deltas:
        if dl == 0.0:
            rows.append(StabilityRow(0.0, 0.0, 0.0, 0.0, 0.0 if factor is not None else None))
            continue
        e1 = abs(solve(base + dl) - y0)
        e2 = abs(solve(base + dl * U) - y0)
        rows.append(StabilityRow(dl, e1, e2, float(np.sqrt(C) * dl),
                                 None if factor is None else factor * dl))
    return StabilityReport(rows, backend, C)
