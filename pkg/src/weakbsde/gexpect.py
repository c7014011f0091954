"""g-expectations: the value at time 0 of a Lipschitz BSDE with given terminal data.

Three backends share one result type:

* ``gexp_lsmc``   regression Monte Carlo (backward Euler, implicit in Y);
* ``gexp_linear`` the closed form for linear drivers, pathwise with the exact
  exponential deflator;
* ``gexp_tree``   exact backward recursion on a binomial lattice.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .problem import Driver
from .simulate import N_BATCHES, PathEnsemble, batch_slices, batch_stderr, deflator_for

FIXED_POINT_ITERS = 20
FIXED_POINT_TOL = 1e-10
TREE_ITERS = 100
TREE_TOL = 1e-15


@dataclass
class BsdeSolution:
    Y0: float
    backend: str
    stderr: float = 0.0
    Y: Optional[object] = None
    Z: Optional[object] = None
    ridge: bool = False
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def __float__(self):
        return float(self.Y0)


def apriori_bound(driver: Driver, T: float) -> float:
    """Gronwall bound on ``|Y0|`` for terminal data valued in [0, 1]."""
    return float(np.exp(driver.K_g * T) * (1.0 + T * driver.chi_g))


# ---------------------------------------------------------------------------
# regression Monte Carlo


@dataclass(frozen=True)
class BasisConfig:
    """Polynomial regression basis.

    ``features`` may contain ``"state"`` (log S when the ensemble carries an
    asset, otherwise the Brownian position) and ``"M"`` (the control channel).
    """

    features: tuple = ("state", "M")
    degree: int = 2

    def __post_init__(self):
        unknown = set(self.features) - {"state", "M"}
        if unknown:
            raise ValueError(f"unknown basis features {sorted(unknown)}")
        if self.degree < 0:
            raise ValueError("basis degree must be >= 0")


def _feature_matrix(ens: PathEnsemble, k: int, M: Optional[np.ndarray], cfg: BasisConfig,
                    rows: slice) -> np.ndarray:
    cols = []
    if "state" in cfg.features:
        if ens.S is not None:
            cols.append(np.log(ens.S[rows, k]))
        else:
            cols.extend(ens.W[rows, k, j] for j in range(ens.d))
    if "M" in cfg.features and M is not None:
        cols.append(M[rows, k])
    feats = []
    for c in cols:
        sd = c.std()
        if sd > 1e-12:
            feats.append((c - c.mean()) / sd)
    n = rows.stop - rows.start
    basis = [np.ones(n)]
    for deg in range(1, cfg.degree + 1):
        for combo in itertools.combinations_with_replacement(range(len(feats)), deg):
            col = feats[combo[0]].copy()
            for j in combo[1:]:
                col *= feats[j]
            basis.append(col)
    return np.column_stack(basis)


def _regress(B: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, bool]:
    coef, _, rank, sv = np.linalg.lstsq(B, targets, rcond=None)
    if rank == B.shape[1]:
        return B @ coef, False
    # rank deficient: ridge-regularized normal equations
    G = B.T @ B
    lam = 1e-8 * max(np.trace(G) / G.shape[0], 1e-300)
    coef = np.linalg.solve(G + lam * np.eye(G.shape[0]), B.T @ targets)
    return B @ coef, True


def _implicit_step(t, E, Z, driver, dt):
    Y = E.copy()
    for _ in range(FIXED_POINT_ITERS):
        Y_new = E + driver(t, Y, Z) * dt
        if np.max(np.abs(Y_new - Y), initial=0.0) <= FIXED_POINT_TOL:
            return Y_new
        Y = Y_new
    return Y


def _lsmc_sweep(ens: PathEnsemble, terminal: np.ndarray, driver: Driver, cfg: BasisConfig,
                M: Optional[np.ndarray], rows: slice, on_step: Optional[Callable] = None):
    K, dt, d = ens.n_steps, ens.dt, ens.d
    Y = terminal[rows].astype(float)
    ridge = False
    for k in range(K - 1, -1, -1):
        n = Y.size
        if k == 0:
            B = np.ones((n, 1))
        else:
            B = _feature_matrix(ens, k, M, cfg, rows)
        dW = ens.dW[rows, k]
        E, flag = _regress(B, Y)
        ridge |= flag
        # the fitted E is F_t-measurable, so centring leaves the conditional mean of Z unchanged
        Z, flag = _regress(B, (Y - E)[:, None] * dW / dt)
        ridge |= flag
        t = ens.times[k]
        Y = _implicit_step(t, E, Z, driver, dt)
        if on_step is not None:
            on_step(k, t, Y, Z)
    return float(Y.mean()), ridge


def gexp_lsmc(ens: PathEnsemble, terminal, driver: Driver, basis: Optional[BasisConfig] = None,
              M: Optional[np.ndarray] = None, n_batches: int = N_BATCHES,
              on_step: Optional[Callable] = None) -> BsdeSolution:
    """Regression Monte Carlo for ``Y = xi + int g ds - int Z dW``.

    Z is the regression of ``(Y_{t+dt} - E_t) dW / dt`` on the basis; Y solves the
    implicit Euler step by fixed-point iteration.  ``stderr`` comes from full
    re-solves on ``n_batches`` disjoint path batches.  ``on_step(k, t, Y, Z)``
    is called after every step of the full-sample sweep.
    """
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (ens.n_paths,):
        raise ValueError("terminal must hold one value per path")
    if not np.all(np.isfinite(terminal)):
        raise ValueError("terminal values must be finite")
    cfg = basis or BasisConfig()
    full = slice(0, ens.n_paths)
    y0, ridge = _lsmc_sweep(ens, terminal, driver, cfg, M, full, on_step)
    stderr = 0.0
    if n_batches > 1 and ens.n_paths >= 2 * n_batches:
        vals = []
        for s in batch_slices(ens.n_paths, n_batches):
            v, flag = _lsmc_sweep(ens, terminal, driver, cfg, M, s)
            vals.append(v)
            ridge |= flag
        stderr = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    return BsdeSolution(y0, "lsmc", stderr, ridge=ridge)


# ---------------------------------------------------------------------------
# linear closed form


def linear_samples(ens: PathEnsemble, terminal, driver: Driver) -> np.ndarray:
    """Per-path ``L_T xi + int_0^T L_s g(s, 0, 0) ds`` (trapezoid in time)."""
    if not driver.is_linear:
        raise ValueError("the closed form needs a linear driver")
    terminal = np.asarray(terminal, dtype=float)
    L = deflator_for(ens, driver)
    out = L[:, -1] * terminal
    if driver.g0 != 0.0:
        out = out + driver.g0 * np.trapezoid(L, dx=ens.dt, axis=1)
    return out


def gexp_linear(ens: PathEnsemble, terminal, driver: Driver, n_batches: int = N_BATCHES) -> BsdeSolution:
    samples = linear_samples(ens, terminal, driver)
    return BsdeSolution(float(samples.mean()), "linear_closed_form",
                        batch_stderr(samples, n_batches), samples=samples)


def g_expectation(ens: PathEnsemble, terminal, driver: Driver, backend: str = "auto",
                  **kw) -> BsdeSolution:
    """Dispatch to the closed form for linear drivers, regression otherwise."""
    if backend == "auto":
        backend = "linear" if driver.is_linear else "lsmc"
    if backend == "linear":
        return gexp_linear(ens, terminal, driver, kw.get("n_batches", N_BATCHES))
    if backend == "lsmc":
        return gexp_lsmc(ens, terminal, driver, **kw)
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# binomial lattice


@dataclass(frozen=True)
class BinomialLattice:
    """Binomial model of one Brownian component over ``depth`` steps.

    The increments ``u > 0 > v`` are chosen so that the step has mean 0 and
    variance ``dt`` under the up-probability ``p``.  With ``recombining`` the
    terminal data has ``depth + 1`` entries indexed by the number of up moves;
    otherwise ``2**depth`` leaves in path order (first move is the most
    significant bit, 1 = up).
    """

    depth: int
    T: float = 1.0
    p: float = 0.5
    recombining: bool = True

    def __post_init__(self):
        if not 1 <= self.depth <= 20:
            raise ValueError("tree depth must lie in 1..20")
        if not 0.0 < self.p < 1.0:
            raise ValueError("branch probability must lie in (0, 1)")

    @property
    def dt(self) -> float:
        return self.T / self.depth

    @property
    def up(self) -> float:
        return float(np.sqrt(self.dt * (1.0 - self.p) / self.p))

    @property
    def down(self) -> float:
        return float(-np.sqrt(self.dt * self.p / (1.0 - self.p)))

    @property
    def n_terminal(self) -> int:
        return self.depth + 1 if self.recombining else 2 ** self.depth

    def terminal_W(self) -> np.ndarray:
        if self.recombining:
            j = np.arange(self.depth + 1)
            return j * self.up + (self.depth - j) * self.down
        bits = (np.arange(2 ** self.depth)[:, None] >> np.arange(self.depth)[::-1]) & 1
        return bits.sum(axis=1) * self.up + (self.depth - bits.sum(axis=1)) * self.down

    def terminal_probabilities(self) -> np.ndarray:
        if self.recombining:
            from scipy.stats import binom
            return binom.pmf(np.arange(self.depth + 1), self.depth, self.p)
        ups = np.array([bin(i).count("1") for i in range(2 ** self.depth)])
        return self.p ** ups * (1 - self.p) ** (self.depth - ups)

    def children(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.recombining:
            return values[1:], values[:-1]
        return values[1::2], values[0::2]


def gexp_tree(tree: BinomialLattice, terminal, driver: Driver) -> BsdeSolution:
    """Exact backward recursion ``Y = E[Y'] + g(t, Y, Z) dt`` with ``Z = E[Y' dW] / dt``."""
    values = np.asarray(terminal, dtype=float)
    if values.shape != (tree.n_terminal,):
        raise ValueError(f"terminal must have {tree.n_terminal} entries")
    dt, p, u, v = tree.dt, tree.p, tree.up, tree.down
    if dt * driver.K_g >= 1.0:
        raise ValueError("tree recursion needs dt * K_g < 1")
    Ys, Zs = [values], []
    for n in range(tree.depth - 1, -1, -1):
        up, dn = tree.children(values)
        E = p * up + (1 - p) * dn
        Z = ((p * u) * up + ((1 - p) * v) * dn) / dt
        Z2 = Z[:, None]
        t = n * dt
        Y = E.copy()
        for it in range(TREE_ITERS):
            Y_new = E + driver(t, Y, Z2) * dt
            if np.all(np.abs(Y_new - Y) <= TREE_TOL * np.maximum(1.0, np.abs(Y_new))):
                Y = Y_new
                break
            Y = Y_new
        else:
            raise ArithmeticError("tree fixed point did not converge")
        values = Y
        Ys.append(Y)
        Zs.append(Z)
    return BsdeSolution(float(values[0]), "tree", 0.0, Y=Ys[::-1], Z=Zs[::-1])


def tree_linear_response(tree: BinomialLattice, a_y: float) -> float:
    """Factor by which an additive terminal shift propagates to the root under ``g = a_y y + ...``."""
    return float((1.0 - a_y * tree.dt) ** (-tree.depth))


def comparison_holds(lo: BsdeSolution, hi: BsdeSolution, n_se: float = 3.0) -> bool:
    return lo.Y0 <= hi.Y0 + n_se * np.hypot(lo.stderr, hi.stderr)


__all__: Sequence[str] = [
    "BsdeSolution", "BasisConfig", "BinomialLattice", "apriori_bound", "comparison_holds",
    "g_expectation", "gexp_linear", "gexp_lsmc", "gexp_tree", "linear_samples",
    "tree_linear_response",
]
