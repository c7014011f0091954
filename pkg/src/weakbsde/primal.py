"""Primal value ``Y0(m) = inf_alpha E^g[Phi(M_T^alpha)]`` and its diagnostics.

Two routes are offered.  Policy search evolves the control martingale under a
parametric feedback rule and optimizes the g-expectation of the terminal loss.
The terminal-profile route (linear drivers) builds the optimal terminal value
of M directly from the multiplier ``l`` of the mean constraint, path by path,
and tunes ``l`` so that the sample mean equals ``m`` exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .gexpect import BasisConfig, BsdeSolution, g_expectation, gexp_lsmc
from .problem import ProblemSpec
from .simulate import ControlPolicy, PathEnsemble, deflator_for, evolve_control
from .transforms import convex_envelope, fenchel_loss

POLICY_BUDGET = 400
FEEDBACK_SWEEPS = 5
LOG_L_BOUNDS = (-60.0, 60.0)


def _check_m(m: float) -> float:
    m = float(m)
    if not 0.0 <= m <= 1.0 or not np.isfinite(m):
        raise ValueError(f"threshold m={m} outside [0, 1]")
    return m


def _evaluate(spec: ProblemSpec, ens: PathEnsemble, terminal, M=None, basis=None,
              n_batches: int = 16) -> BsdeSolution:
    if spec.driver.is_linear:
        return g_expectation(ens, terminal, spec.driver, "linear", n_batches=n_batches)
    return gexp_lsmc(ens, terminal, spec.driver, basis=basis, M=M, n_batches=n_batches)


# ---------------------------------------------------------------------------
# mean-constrained Lagrangian profiles


@dataclass
class MultiplierFit:
    """Per-path profile with sample mean ``m``, built from a multiplier bracket."""

    M: np.ndarray
    l_hat: float
    bracket: tuple
    fractional: Optional[int]


def fit_multiplier(select: Callable[[float], np.ndarray], m: float, n: int,
                   lo_anchor: np.ndarray, hi_anchor: np.ndarray,
                   log_bounds: tuple = LOG_L_BOUNDS, width_tol: float = 1e-13,
                   max_iter: int = 400) -> MultiplierFit:
    """Find ``l`` with ``mean(select(l-)) <= m <= mean(select(l+))`` and mix the two profiles.

    ``select(l)`` must be non-decreasing in ``l`` on every path.  Bisection runs
    on ``log l``; the paths that differ across the final bracket are switched
    to their upper value in index order and one of them takes a fractional
    value, so that the returned profile has sample mean ``m`` up to rounding.
    """
    target = m * n
    a, b = log_bounds
    M_a, M_b = select(np.exp(a)), select(np.exp(b))
    l_lo, l_hi = np.exp(a), np.exp(b)
    if M_a.sum() > target:
        M_b, l_hi = M_a, l_lo
        M_a, l_lo = lo_anchor, 0.0
    elif M_b.sum() < target:
        M_a, l_lo = M_b, l_hi
        M_b, l_hi = hi_anchor, np.inf
    else:
        for _ in range(max_iter):
            if b - a <= width_tol:
                break
            c = 0.5 * (a + b)
            M_c = select(np.exp(c))
            s = M_c.sum()
            if s < target:
                a, M_a = c, M_c
            elif s > target:
                b, M_b = c, M_c
            else:
                return MultiplierFit(M_c, float(np.exp(c)), (float(np.exp(c)),) * 2, None)
        l_lo, l_hi = np.exp(a), np.exp(b)
    if l_lo == 0.0:
        l_hat = l_hi
    elif np.isinf(l_hi):
        l_hat = l_lo
    else:
        l_hat = float(np.sqrt(l_lo * l_hi))
    need = target - M_a.sum()
    M = np.array(M_a, dtype=float, copy=True)
    D = np.flatnonzero(M_b != M_a)
    frac = None
    if D.size and need > 0:
        gain = M_b[D] - M_a[D]
        cum = np.cumsum(gain)
        k = int(np.searchsorted(cum, need, side="right"))
        M[D[:k]] = M_b[D[:k]]
        if k < D.size:
            rest = need - (cum[k - 1] if k else 0.0)
            if rest > 0:
                M[D[k]] = M_a[D[k]] + rest
                frac = int(D[k])
    return MultiplierFit(M, float(l_hat), (float(l_lo), float(l_hi)), frac)


@dataclass
class ProfileSolution:
    m: float
    Y0: float
    stderr: float
    l_hat: float
    M_T: np.ndarray = field(repr=False)
    fractional: Optional[int] = None
    bracket: tuple = ()
    method: str = "profile"

    @property
    def m_realized(self) -> float:
        return float(self.M_T.mean())


def _require_linear(spec: ProblemSpec):
    if not spec.driver.is_linear:
        raise ValueError("the terminal-profile construction needs a linear driver; use primal_value")


def profile_value(spec: ProblemSpec, m: float, ens: PathEnsemble, conj=None) -> ProfileSolution:
    """Optimal terminal profile ``M_T = grad Phi~(l / L_T)`` with ``mean(M_T) = m``.

    Every path sits on a vertex of the convex envelope except at most one, whose
    fractional value is valued with the envelope (a randomization inside that
    path); the returned value is the g-expectation of ``xi * hat_Phi(M_T)``.
    """
    _require_linear(spec)
    m = _check_m(m)
    conj = conj or fenchel_loss(spec.loss)
    env = convex_envelope(spec.loss)
    L_T = deflator_for(ens, spec.driver)[:, -1]
    xi = ens.xi
    n = ens.n_paths

    def select(l):
        return conj.grad_scaled(l / L_T, xi)

    fit = fit_multiplier(select, m, n, np.full(n, env.hull_m[0]), np.full(n, env.hull_m[-1]))
    terminal = xi * env(fit.M)
    sol = _evaluate(spec, ens, terminal)
    return ProfileSolution(m, sol.Y0, sol.stderr, fit.l_hat, fit.M, fit.fractional, fit.bracket)


def terminal_profile_policy(spec: ProblemSpec, l: float, ens: PathEnsemble, conj=None):
    """Point ``(m_realized, Y0, stderr)`` on the value curve attained by the profile at ``l``."""
    _require_linear(spec)
    if not l > 0:
        raise ValueError("multiplier l must be positive")
    conj = conj or fenchel_loss(spec.loss)
    L_T = deflator_for(ens, spec.driver)[:, -1]
    M_T = conj.grad_scaled(l / L_T, ens.xi)
    sol = _evaluate(spec, ens, ens.xi * spec.loss.phi(M_T))
    return float(M_T.mean()), sol.Y0, sol.stderr


# ---------------------------------------------------------------------------
# policy search


@dataclass(frozen=True)
class PolicyFamily:
    """Finite-dimensional family of controls.

    ``constant``: alpha in R^d.  ``feedback_grid``: alpha on an ``n_t x n_m``
    lattice in (time, M), piecewise constant in time and linear in M, acting
    on the first Brownian component.  ``terminal_profile``: the profile route.
    """

    kind: str = "constant"
    n_t: int = 4
    n_m: int = 5
    bound: float = 2.0

    def __post_init__(self):
        if self.kind not in ("constant", "feedback_grid", "terminal_profile"):
            raise ValueError(f"unknown policy family {self.kind!r}")

    def size(self, d: int) -> int:
        return d if self.kind == "constant" else self.n_t * self.n_m

    def policy(self, params, T: float, d: int, t0: float = 0.0) -> ControlPolicy:
        params = np.clip(np.asarray(params, dtype=float), -self.bound, self.bound)
        if self.kind == "constant":
            return ControlPolicy.constant(params)
        grid = params.reshape(self.n_t, self.n_m)
        nodes = np.linspace(0.0, 1.0, self.n_m)
        n_t = self.n_t

        def rule(t, feats, M):
            i = min(int((t - t0) / T * n_t), n_t - 1)
            out = np.zeros((M.size, d))
            out[:, 0] = np.interp(M, nodes, grid[i])
            return out

        return ControlPolicy(rule, params)


@dataclass
class PrimalResult:
    m: float
    Y0: float
    stderr: float
    policy: Optional[ControlPolicy]
    params: Optional[np.ndarray] = None
    flags: tuple = ()
    n_evals: int = 0
    method: str = "policy"


def policy_value(spec: ProblemSpec, m: float, policy: ControlPolicy, ens: PathEnsemble,
                 basis: Optional[BasisConfig] = None, n_batches: int = 16) -> BsdeSolution:
    """g-expectation of ``xi * Phi(M_T)`` under a fixed control."""
    M = evolve_control(ens, _check_m(m), policy)
    terminal = ens.xi * spec.loss.phi(M[:, -1])
    return _evaluate(spec, ens, terminal, M=M, basis=basis, n_batches=n_batches)


def primal_value(spec: ProblemSpec, m: float, ens: PathEnsemble,
                 family: Optional[PolicyFamily] = None, budget: int = POLICY_BUDGET,
                 basis: Optional[BasisConfig] = None) -> PrimalResult:
    """Best control found in ``family``; never worse than the null control.

    Constant controls use Nelder-Mead from two starts, lattice controls use
    coordinate descent over a fixed candidate set.  The result is an incumbent,
    not a certified global minimum; ``"budget"`` is flagged when the
    evaluation budget ran out.
    """
    m = _check_m(m)
    family = family or PolicyFamily()
    if family.kind == "terminal_profile":
        sol = profile_value(spec, m, ens)
        return PrimalResult(m, sol.Y0, sol.stderr, None, np.array([sol.l_hat]), method="profile")
    d = ens.d
    k = family.size(d)
    cache: dict = {}

    def objective(x):
        key = tuple(np.round(np.clip(x, -family.bound, family.bound), 12))
        if key not in cache:
            pol = family.policy(np.array(key), ens.T, d, ens.t0)
            cache[key] = policy_value(spec, m, pol, ens, basis, n_batches=1).Y0
        return cache[key]

    best_x = np.zeros(k)
    best = objective(best_x)
    flags = []
    if 0.0 < m < 1.0:
        if family.kind == "constant":
            per_start = max((budget - 1) // 2, 1)
            for start in (0.5, -0.5):
                res = minimize(objective, np.full(k, start), method="Nelder-Mead",
                               options={"maxfev": per_start, "xatol": 1e-4, "fatol": 1e-10})
                if res.fun < best:
                    best, best_x = float(res.fun), np.clip(res.x, -family.bound, family.bound)
                if res.nfev >= per_start and not res.success:
                    flags.append("budget")
        else:
            candidates = np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) * family.bound / 2
            for _ in range(FEEDBACK_SWEEPS):
                improved = False
                for j in range(k):
                    for c in candidates:
                        x = best_x.copy()
                        x[j] = c
                        v = objective(x)
                        if v < best - 1e-14:
                            best, best_x, improved = v, x, True
                if not improved:
                    break
            else:
                flags.append("budget")
    pol = family.policy(best_x, ens.T, d, ens.t0)
    sol = policy_value(spec, m, pol, ens, basis)
    return PrimalResult(m, sol.Y0, sol.stderr, pol, best_x, tuple(sorted(set(flags))), len(cache))


# ---------------------------------------------------------------------------
# value curves


def convexity_defect(m, y) -> float:
    """Largest amount by which an interior point lies above the chord of its neighbours,
    times two (equals minus the second difference on a uniform grid)."""
    m, y = np.asarray(m, float), np.asarray(y, float)
    if m.size < 3:
        return 0.0
    w = (m[1:-1] - m[:-2]) / (m[2:] - m[:-2])
    chord = (1 - w) * y[:-2] + w * y[2:]
    return float(max(0.0, np.max(2.0 * (y[1:-1] - chord))))


def monotonicity_defect(y) -> float:
    y = np.asarray(y, float)
    if y.size < 2:
        return 0.0
    return float(max(0.0, np.max(y[:-1] - y[1:])))


@dataclass(frozen=True)
class CurveEntry:
    m: float
    Y0: float
    stderr: float
    method: str


@dataclass
class ValueCurve:
    entries: list

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.m)
        if any(not 0.0 <= e.m <= 1.0 for e in self.entries):
            raise ValueError("curve abscissae must lie in [0, 1]")

    @property
    def m(self) -> np.ndarray:
        return np.array([e.m for e in self.entries])

    @property
    def values(self) -> np.ndarray:
        return np.array([e.Y0 for e in self.entries])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([e.stderr for e in self.entries])

    @property
    def convexity_defect(self) -> float:
        return convexity_defect(self.m, self.values)

    @property
    def monotonicity_defect(self) -> float:
        return monotonicity_defect(self.values)

    def __call__(self, m) -> np.ndarray:
        return np.interp(m, self.m, self.values)


def value_curve(spec: ProblemSpec, m_grid, ens: PathEnsemble, method: str = "both",
                family: Optional[PolicyFamily] = None, budget: int = POLICY_BUDGET,
                basis: Optional[BasisConfig] = None) -> ValueCurve:
    """One entry per grid point; ``both`` keeps the smaller of the two routes.

    The profile route needs a linear driver and is skipped otherwise.
    """
    if method not in ("policy", "profile", "both"):
        raise ValueError(f"unknown method {method!r}")
    use_profile = method in ("profile", "both") and spec.driver.is_linear
    use_policy = method in ("policy", "both") or not use_profile
    conj = fenchel_loss(spec.loss) if use_profile else None
    entries = []
    for m in m_grid:
        best = None
        if use_profile:
            p = profile_value(spec, m, ens, conj)
            best = CurveEntry(float(m), p.Y0, p.stderr, "profile")
        if use_policy:
            r = primal_value(spec, m, ens, family, budget, basis)
            if best is None or r.Y0 < best.Y0:
                best = CurveEntry(float(m), r.Y0, r.stderr, "policy")
        entries.append(best)
    return ValueCurve(entries)


# ---------------------------------------------------------------------------
# dynamic programming check


@dataclass
class DppReport:
    m: float
    t_mid: float
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    inner_m: np.ndarray = field(repr=False)
    inner_values: np.ndarray = field(repr=False)
    submartingale: list = field(default_factory=list, repr=False)

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def gap_rel(self) -> float:
        return self.gap / max(abs(self.lhs), 1e-12)

    @property
    def submartingale_ok(self) -> bool:
        return all(v >= self.lhs - 3.0 * np.hypot(se, self.lhs_stderr) for v, se in self.submartingale)


def _state_dependent(spec: ProblemSpec) -> bool:
    return spec.market is not None and spec.claim.kind != "constant"


def _curve_rows(V: np.ndarray, x: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation of knot values ``V`` (n x R) at ``M`` (n,)."""
    j = np.clip(np.searchsorted(x, M, side="right") - 1, 0, x.size - 2)
    w = (M - x[j]) / (x[j + 1] - x[j])
    rows = np.arange(M.size)
    return (1 - w) * V[rows, j] + w * V[rows, j + 1]


def _window_with_state(spec, ens, k_mid, s_level):
    """Later window of the ensemble restarted from asset level ``s_level``."""
    win = ens.window(k_mid)
    S = win.S * (s_level / win.S[:, :1])
    S.setflags(write=False)
    ch = dict(win.channels)
    ch["S"] = S
    xi = spec.claim.payoff(S[:, -1], ens.n_paths)
    ch["xi"] = xi
    return PathEnsemble(win.n_paths, win.n_steps, win.T, win.d, win.seed, win.dW, ch, t0=win.t0)


def _inner_value(spec, m, ens, family, budget, basis) -> float:
    if spec.driver.is_linear:
        return profile_value(spec, m, ens).Y0
    return primal_value(spec, m, ens, family, budget, basis).Y0


def check_dpp(spec: ProblemSpec, m: float, t_mid: float, ens: PathEnsemble, resolution: int = 21,
              n_state: int = 21, n_policies: int = 20, policy_seed: int = 0,
              family: Optional[PolicyFamily] = None, budget: int = POLICY_BUDGET,
              basis: Optional[BasisConfig] = None) -> DppReport:
    """Compare ``Y0(m)`` with the two-stage value through ``t_mid``.

    The inner curve ``m' -> Y_{t_mid}(m')`` is solved on the later part of the
    ensemble (restarted from ``n_state`` asset levels when the claim depends on
    the asset) and interpolated linearly in ``m'``.  The outer stage minimizes
    the g-expectation over ``[0, t_mid]`` of the interpolated curve.  It also
    records, for ``n_policies`` random fixed controls, the g-expectation of the
    curve at ``M_{t_mid}``, which should never fall below ``Y0(m)``.
    """
    m = _check_m(m)
    k_mid = int(round(t_mid / ens.dt))
    if not 0 < t_mid < ens.T or not 0 < k_mid < ens.n_steps or abs(k_mid * ens.dt - t_mid) > 1e-9:
        raise ValueError("t_mid must be an interior point of the time grid")
    if spec.driver.is_linear:
        top = profile_value(spec, m, ens)
        lhs, lhs_se = top.Y0, top.stderr
    else:
        top = primal_value(spec, m, ens, family, budget, basis)
        lhs, lhs_se = top.Y0, top.stderr

    x = np.linspace(0.0, 1.0, resolution)
    inner_spec = spec.replace(horizon_T=ens.T - t_mid)
    first = ens.window(0, k_mid)
    n = ens.n_paths
    if _state_dependent(spec):
        S_mid = ens.S[:, k_mid]
        levels = np.quantile(S_mid, np.linspace(0.0, 1.0, n_state))
        table = np.empty((n_state, resolution))
        for b, s in enumerate(levels):
            win = _window_with_state(spec, ens, k_mid, s)
            table[b] = [_inner_value(inner_spec, mm, win, family, budget, basis) for mm in x]
        # per-path knot values: linear in the asset level, clipped to the lattice
        pos = np.interp(S_mid, levels, np.arange(n_state))
        b0 = np.clip(np.floor(pos).astype(int), 0, n_state - 2)
        wb = (pos - b0)[:, None]
        V = (1 - wb) * table[b0] + wb * table[b0 + 1]
        inner = table
    else:
        win = ens.window(k_mid)
        inner = np.array([_inner_value(inner_spec, mm, win, family, budget, basis) for mm in x])
        V = np.broadcast_to(inner, (n, resolution))

    first_spec = spec.replace(horizon_T=t_mid)
    if spec.driver.is_linear:
        L = deflator_for(first, spec.driver)[:, -1]
        weighted = L[:, None] * V

        def select(l):
            return x[np.argmin(weighted - l * x[None, :], axis=1)]

        fit = fit_multiplier(select, m, n, np.zeros(n), np.ones(n))
        sol = _evaluate(first_spec, first, _curve_rows(V, x, fit.M))
        rhs, rhs_se = sol.Y0, sol.stderr
    else:
        def outer(alpha):
            pol = ControlPolicy.constant(np.clip(alpha, -2.0, 2.0))
            M = evolve_control(first, m, pol)
            return gexp_lsmc(first, _curve_rows(V, x, M[:, -1]), spec.driver, basis, M=M, n_batches=1).Y0

        res = minimize(outer, np.full(ens.d, 0.5), method="Nelder-Mead", options={"maxfev": budget})
        alpha = res.x if res.fun < outer(np.zeros(ens.d)) else np.zeros(ens.d)
        M = evolve_control(first, m, ControlPolicy.constant(np.clip(alpha, -2.0, 2.0)))
        sol = gexp_lsmc(first, _curve_rows(V, x, M[:, -1]), spec.driver, basis, M=M)
        rhs, rhs_se = sol.Y0, sol.stderr

    rng = np.random.default_rng(policy_seed)
    checks = []
    for j in range(n_policies):
        a, b = rng.uniform(-1.5, 1.5, size=2)
        if j % 2 == 0:
            pol = ControlPolicy.constant(np.r_[a, np.zeros(ens.d - 1)])
        else:
            def rule(t, feats, M, a=a, b=b):
                out = np.zeros((M.size, ens.d))
                out[:, 0] = a + b * feats["W"][:, 0]
                return out
            pol = ControlPolicy(rule, np.array([a, b]))
        M = evolve_control(first, m, pol)
        s = _evaluate(first_spec, first, _curve_rows(V, x, M[:, -1]), M=M, basis=basis)
        checks.append((s.Y0, s.stderr))
    return DppReport(m, t_mid, lhs, rhs, lhs_se, rhs_se, x, inner, checks)


# ---------------------------------------------------------------------------
# continuity


def delta_formula(mu_i: float, mu_j: float) -> float:
    """Relative distance used in the continuity estimate between thresholds."""
    if mu_i < mu_j:
        return 1.0 - mu_i / mu_j
    if mu_i > mu_j:
        return (mu_i - mu_j) / (1.0 - mu_j)
    return 0.0


@dataclass(frozen=True)
class ContinuityRow:
    delta: float
    diff: float
    delta_down: float
    delta_up: float


def continuity_modulus(spec: ProblemSpec, m_center: float, deltas: Sequence[float], ens: PathEnsemble,
                       family: Optional[PolicyFamily] = None) -> list:
    """Table of ``max |Y0(m +- delta) - Y0(m)|`` with the matching relative distances."""
    m_center = _check_m(m_center)
    deltas = [float(dl) for dl in deltas]
    if any(dl < 0 for dl in deltas) or any(not (0 < m_center - dl and m_center + dl < 1) for dl in deltas if dl > 0):
        raise ValueError("m_center +- delta must stay inside (0, 1)")

    def value(mm):
        if spec.driver.is_linear:
            return profile_value(spec, mm, ens).Y0
        return primal_value(spec, mm, ens, family).Y0

    y0 = value(m_center)
    rows = []
    for dl in deltas:
        if dl == 0.0:
            rows.append(ContinuityRow(0.0, 0.0, 0.0, 0.0))
            continue
        diff = max(abs(value(m_center - dl) - y0), abs(value(m_center + dl) - y0))
        rows.append(ContinuityRow(dl, diff,
                                  delta_formula(m_center - dl, m_center) + delta_formula(m_center, m_center - dl),
                                  delta_formula(m_center + dl, m_center) + delta_formula(m_center, m_center + dl)))
    return rows
