"""Dual bound ``sup_l (l m - X0(l))`` and the optimality relations linking it to the primal.

``X0(l)`` is the infimum over dual controls ``lam = (nu, theta)`` of
``E[int L g~(lam) ds + L_T Phi~(l / L_T)]`` where ``L`` is the deflator of ``lam``.
For a linear driver the dual domain is a single point and no inner search is
needed.  Other convex drivers are searched over constant controls only, which
still yields a valid lower bound on the primal value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .gexpect import gexp_lsmc
from .problem import ProblemSpec
from .simulate import PathEnsemble, batch_stderr, evolve_deflator
from .transforms import convex_envelope, fenchel_driver, fenchel_loss

L_BRACKET = (1e-4, 1e4)
INNER_BUDGET = 80


@dataclass(frozen=True)
class DualEval:
    l: float
    X0: float
    stderr: float
    lam: tuple

    def value(self, m: float) -> float:
        return self.l * m - self.X0


def _lam_vector(spec: ProblemSpec, lam) -> np.ndarray:
    if lam is None:
        if not spec.driver.is_linear:
            raise ValueError("a dual control is required for a non-linear driver")
        a_y, a_z = spec.driver.lam
        return np.concatenate([[a_y], a_z])
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size != spec.d + 1:
        raise ValueError("dual control must have d + 1 components")
    return lam


def dual_functional(spec: ProblemSpec, l: float, ens: PathEnsemble, lam=None, conj=None) -> DualEval:
    """``X0^{l, lam}`` for a constant dual control (default: the linear driver's own)."""
    if not l > 0:
        raise ValueError("l must be positive")
    lam = _lam_vector(spec, lam)
    gt = fenchel_driver(spec.driver, 0.0, lam)
    if not np.isfinite(gt):
        raise ValueError("dual control outside dual domain of the driver")
    conj = conj or fenchel_loss(spec.loss)
    L = evolve_deflator(ens, lam[0], lam[1:], K_g=spec.driver.K_g)
    L_T = L[:, -1]
    samples = L_T * conj.value_scaled(l / L_T, ens.xi)
    if gt != 0.0:
        samples = samples + gt * np.trapezoid(L, dx=ens.dt, axis=1)
    return DualEval(float(l), float(samples.mean()), batch_stderr(samples), tuple(lam))


def _inner_inf(spec: ProblemSpec, l: float, ens: PathEnsemble, conj, budget: int) -> DualEval:
    """Nelder-Mead over constant controls in the dual box (tanh reparametrization)."""
    drv = spec.driver
    d = spec.d
    K = drv.K_g
    lo = drv.dual_lo if drv.dual_lo is not None else np.full(d + 1, -K)
    hi = drv.dual_hi if drv.dual_hi is not None else np.full(d + 1, K)
    lo, hi = np.maximum(lo, -K), np.minimum(hi, K)
    free = hi > lo
    cache: dict = {}

    def to_lam(p):
        lam = lo.copy()
        lam[free] = lo[free] + (hi[free] - lo[free]) * 0.5 * (1.0 + np.tanh(p))
        return lam

    def f(p):
        lam = to_lam(p)
        key = tuple(np.round(lam, 14))
        if key not in cache:
            try:
                cache[key] = dual_functional(spec, l, ens, lam, conj)
            except ValueError:
                return np.inf
        return cache[key].X0

    start = np.zeros(int(free.sum()))
    best = f(start)
    if start.size:
        res = minimize(f, start, method="Nelder-Mead", options={"maxfev": budget, "xatol": 1e-6, "fatol": 1e-12})
        best = min(best, res.fun)
    winner = min((e for e in cache.values()), key=lambda e: e.X0)
    return winner


@dataclass
class DualResult:
    m: float
    l_star: float
    lambda_star: tuple
    X0_at_l: float
    X0_stderr: float
    dual_value: float
    evaluations: list = field(default_factory=list, repr=False)
    flags: tuple = ()
    gap_vs_primal: Optional[float] = None
    concavity_defect: float = 0.0
    signature: tuple = ()

    @property
    def stderr(self) -> float:
        return self.X0_stderr

    def weak_duality_violations(self, primal: float, primal_stderr: float, n_se: float = 3.0) -> list:
        """Evaluated ``(l, value)`` pairs that exceed the primal value beyond ``n_se`` errors."""
        out = []
        for e in self.evaluations:
            v = e.value(self.m)
            if v > primal + n_se * np.hypot(primal_stderr, e.stderr) + 1e-12:
                out.append((e.l, v))
        return out


def _polish(evaluate, m: float, x0: float, lo: float, hi: float, conj, ens, spec) -> Optional[float]:
    """Locate the kink of the piecewise-linear ``X0`` where its slope crosses ``m``.

    The right derivative of ``X0`` at ``l`` is the sample mean of the profile
    ``grad Phi~(l / L_T)``; bisection on ``log l`` brackets the crossing.
    """
    from .simulate import deflator_for

    L_T = deflator_for(ens, spec.driver)[:, -1]
    xi = ens.xi

    def slope(x):
        return conj.grad_scaled(np.exp(x) / L_T, xi).mean()

    a, b = max(lo, x0 - 1e-3), min(hi, x0 + 1e-3)
    while a > lo and slope(a) > m:
        a = max(lo, a - 2 * (b - a))
    while b < hi and slope(b) < m:
        b = min(hi, b + 2 * (b - a))
    if slope(a) > m or slope(b) < m:
        return None
    while b - a > 1e-14:
        c = 0.5 * (a + b)
        if slope(c) < m:
            a = c
        else:
            b = c
    return 0.5 * (a + b)


def dual_value(spec: ProblemSpec, m: float, ens: PathEnsemble, bracket: tuple = L_BRACKET,
               xatol: float = 1e-10, inner_budget: int = INNER_BUDGET,
               primal: Optional[float] = None, n_concavity: int = 9) -> DualResult:
    """Maximize ``l m - X0(l)`` over ``log l`` in ``bracket`` (Brent's bounded method).

    For linear drivers the Brent estimate is refined to the exact kink of the
    sample objective.  The map is concave in ``l``; ``concavity_defect`` is the
    largest excess of a chord over the curve at points around ``l_star``.
    """
    m = float(m)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"threshold m={m} outside [0, 1]")
    conj = fenchel_loss(spec.loss)
    evals: list[DualEval] = []

    def X0(l):
        e = dual_functional(spec, l, ens, None, conj) if spec.driver.is_linear \
            else _inner_inf(spec, l, ens, conj, inner_budget)
        evals.append(e)
        return e

    lo, hi = np.log(bracket[0]), np.log(bracket[1])
    res = minimize_scalar(lambda x: -X0(np.exp(x)).value(m), bounds=(lo, hi), method="bounded",
                          options={"xatol": xatol, "maxiter": 500})
    x_star = float(res.x)
    best = X0(np.exp(x_star))
    if spec.driver.is_linear:
        x_pol = _polish(X0, m, x_star, lo, hi, conj, ens, spec)
        if x_pol is not None:
            cand = X0(np.exp(x_pol))
            if cand.value(m) >= best.value(m):
                best, x_star = cand, x_pol
    flags = []
    if x_star - lo < 1e-6 or hi - x_star < 1e-6:
        flags.append("bracket")

    # concavity in l around the optimum
    ls = np.exp(x_star + np.linspace(-1.0, 1.0, n_concavity))
    ls = ls[(ls >= bracket[0]) & (ls <= bracket[1])]
    vals, ses = [], []
    for l in ls:
        e = X0(l)
        vals.append(e.value(m))
        ses.append(e.stderr)
    vals, ses = np.array(vals), np.array(ses)
    defect = 0.0
    if ls.size >= 3:
        w = (ls[1:-1] - ls[:-2]) / (ls[2:] - ls[:-2])
        chord = (1 - w) * vals[:-2] + w * vals[2:]
        defect = float(max(0.0, np.max(chord - vals[1:-1])))

    dv = best.value(m)
    gap = None if primal is None else float(primal - dv)
    return DualResult(m, best.l, best.lam, best.X0, best.stderr, dv, evals, tuple(flags), gap,
                      defect, ens.signature)


def foc_residuals(spec: ProblemSpec, primal, dual: DualResult, ens: PathEnsemble,
                  l: Optional[float] = None) -> tuple[float, float]:
    """RMS residuals of the driver and terminal optimality relations, relative to ``|Y0|``.

    ``primal`` is a profile solution on ``ens``.  The terminal relation
    compares the primal terminal data ``xi hat_Phi(M_T)`` with
    ``M_T l / L_T - Phi~_xi(l / L_T)`` at ``l = dual.l_star`` (or ``l``); the
    driver relation compares ``g(t, Y, Z)`` with ``nu Y + theta . Z - g~(nu, theta)``
    along the regression solution of the primal BSDE.
    """
    if dual.signature and dual.signature != ens.signature:
        raise ValueError("primal and dual were computed on different ensembles")
    M_T = np.asarray(primal.M_T, dtype=float)
    if M_T.shape != (ens.n_paths,):
        raise ValueError("primal profile does not match the ensemble shape")
    l = dual.l_star if l is None else float(l)
    scale = max(abs(primal.Y0), 1e-8)
    conj = fenchel_loss(spec.loss)
    env = convex_envelope(spec.loss)
    lam = np.asarray(dual.lambda_star, dtype=float)
    nu, theta = lam[0], lam[1:]
    L_T = evolve_deflator(ens, nu, theta)[:, -1]
    xi = ens.xi
    lhs = xi * env(M_T)
    rhs = M_T * (l / L_T) - conj.value_scaled(l / L_T, xi)
    res_terminal = float(np.sqrt(np.mean((lhs - rhs) ** 2)) / scale)

    gt = fenchel_driver(spec.driver, 0.0, lam)
    acc = [0.0, 0]

    def on_step(k, t, Y, Z):
        g = spec.driver(t, Y, Z)
        lin = (nu * Y + Z @ theta) - gt
        acc[0] += float(np.sum((g - lin) ** 2))
        acc[1] += Y.size

    gexp_lsmc(ens, lhs, spec.driver, n_batches=1, on_step=on_step)
    res_driver = float(np.sqrt(acc[0] / max(acc[1], 1)) / scale)
    return res_driver, res_terminal
