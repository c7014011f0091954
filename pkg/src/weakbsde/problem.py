"""Problem data: loss maps, BSDE drivers, market model and their validation.

Loss maps live on the normalized square [0, 1] x [0, 1].  Both ``Psi`` and its
left-continuous inverse ``Phi`` are stored as monotone knot sequences joined by
straight segments; a repeated abscissa encodes a jump.  ``Psi`` is evaluated
right-continuously and ``Phi`` left-continuously at such jumps, so step maps
(the indicator loss) and piecewise-linear maps share one representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOSS_KINDS = ("indicator", "power_loss", "linear", "custom_grid")
DRIVER_FORMS = ("zero", "linear", "convex_custom")
CLAIM_KINDS = ("constant", "digital", "call")

INVERSE_TOL = 1e-9


class StructuralError(ValueError):
    """Malformed input data (as opposed to a violated modelling assumption)."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_knots(x: np.ndarray, v: np.ndarray, name: str) -> None:
    if x.ndim != 1 or v.ndim != 1 or x.shape != v.shape:
        raise StructuralError(f"{name}: knot positions and values must be 1-d arrays of equal length")
    if x.size < 2:
        raise StructuralError(f"{name}: at least two knots are required")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise StructuralError(f"{name}: knots must be finite")
    if np.any(np.diff(x) < 0):
        raise StructuralError(f"{name}: knot positions must be non-decreasing")
    if x[0] < 0.0 or x[-1] > 1.0:
        raise StructuralError(f"{name}: knot positions must lie in [0, 1]")


def eval_right_continuous(x: np.ndarray, v: np.ndarray, q) -> np.ndarray:
    """Evaluate the knot curve at ``q`` taking the last value at repeated positions.

    Points left of the first knot evaluate to ``-inf`` (infeasible region of Psi).
    """
    q = np.asarray(q, dtype=float)
    j = np.searchsorted(x, q, side="right") - 1
    out = np.empty(q.shape)
    below = j < 0
    last = j >= x.size - 1
    mid = ~(below | last)
    out[below] = -np.inf
    out[last] = v[-1]
    jm = j[mid]
    x0, x1 = x[jm], x[jm + 1]
    w = (q[mid] - x0) / (x1 - x0)
    out[mid] = v[jm] + w * (v[jm + 1] - v[jm])
    return out


def eval_left_continuous(x: np.ndarray, v: np.ndarray, q) -> np.ndarray:
    """Evaluate the knot curve at ``q`` taking the first value at repeated positions."""
    q = np.asarray(q, dtype=float)
    j = np.searchsorted(x, q, side="left")
    out = np.empty(q.shape)
    first = j <= 0
    beyond = j >= x.size
    mid = ~(first | beyond)
    out[first] = v[0]
    out[beyond] = v[-1]
    jm = j[mid]
    x0, x1 = x[jm - 1], x[jm]
    w = (q[mid] - x0) / (x1 - x0)
    out[mid] = v[jm - 1] + w * (v[jm] - v[jm - 1])
    return out


def left_inverse(psi_y, psi_v) -> tuple[np.ndarray, np.ndarray]:
    """Knots of ``Phi(m) = inf{y : Psi(y) >= m}`` for a monotone knot curve ``Psi``.

    Inverting a monotone curve amounts to swapping the coordinates of its knots.
    The curve is completed so that ``Phi`` is defined on all of [0, 1]: values
    below ``Psi(0)`` map to 0, values above ``Psi(1)`` map to 1 (``Psi`` equals 1
    on ``[1, inf)``).

    Returns:
        Knot positions (in m) and values of ``Phi``.
    """
    y = np.asarray(psi_y, dtype=float)
    v = np.asarray(psi_v, dtype=float)
    _check_knots(y, v, "psi")
    if np.any(np.diff(v) < 0):
        raise StructuralError("psi: values must be non-decreasing to be inverted")
    m, phi = v.copy(), y.copy()
    if m[0] > 0.0:
        m = np.concatenate([[0.0], m])
        phi = np.concatenate([[phi[0]], phi])
    if m[-1] < 1.0:
        m = np.concatenate([m, [1.0]])
        phi = np.concatenate([phi, [1.0]])
    m = np.clip(m, 0.0, 1.0)
    return m, phi


def phi_on_grid(loss: "LossMap", m_grid=None) -> tuple[np.ndarray, np.ndarray]:
    """``Phi`` evaluated on a canonical grid (101 points unless given)."""
    m = np.linspace(0.0, 1.0, 101) if m_grid is None else np.asarray(m_grid, dtype=float)
    return m, loss.phi(m)


@dataclass(frozen=True)
class LossMap:
    """The pair (Psi, Phi) of a weak terminal constraint.

    ``phi_m``/``phi_v`` are the knots of Phi.  ``psi_y``/``psi_v`` are the knots
    of Psi; they may be ``None`` when Phi is not monotone (validation then
    reports the defect instead of failing on construction).
    """

    phi_m: np.ndarray
    phi_v: np.ndarray
    psi_y: Optional[np.ndarray] = None
    psi_v: Optional[np.ndarray] = None
    kind: str = "custom_grid"
    q: Optional[float] = None
    random_factor: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise StructuralError(f"unknown loss kind {self.kind!r}")
        object.__setattr__(self, "phi_m", _frozen(self.phi_m))
        object.__setattr__(self, "phi_v", _frozen(self.phi_v))
        _check_knots(self.phi_m, self.phi_v, "phi")
        if (self.psi_y is None) != (self.psi_v is None):
            raise StructuralError("psi knots need both positions and values")
        if self.psi_y is not None:
            object.__setattr__(self, "psi_y", _frozen(self.psi_y))
            object.__setattr__(self, "psi_v", _frozen(self.psi_v))
            _check_knots(self.psi_y, self.psi_v, "psi")

    # construction -----------------------------------------------------------
    @classmethod
    def from_psi(cls, y, v, kind="custom_grid", **kw) -> "LossMap":
        m, phi = left_inverse(y, v)
        return cls(m, phi, np.asarray(y, float), np.asarray(v, float), kind=kind, **kw)

    @classmethod
    def from_phi(cls, m, v, kind="custom_grid", **kw) -> "LossMap":
        m = np.asarray(m, dtype=float)
        v = np.asarray(v, dtype=float)
        psi_y = psi_v = None
        monotone = np.all(np.diff(v) >= 0) and v[0] >= 0.0 and v[-1] <= 1.0
        if monotone and np.all(np.diff(m) >= 0):
            # right-continuous inverse: swap coordinates of the Phi curve
            psi_y, psi_v = v.copy(), m.copy()
            if psi_y[-1] < 1.0:
                psi_y = np.concatenate([psi_y, [1.0]])
                psi_v = np.concatenate([psi_v, [1.0]])
        return cls(m, v, psi_y, psi_v, kind=kind, **kw)

    @classmethod
    def indicator(cls, random_factor: bool = False) -> "LossMap":
        """Psi(y) = 1{y >= 1}, Phi(m) = 1{m > 0} (quantile hedging)."""
        return cls.from_psi([0.0, 1.0, 1.0], [0.0, 0.0, 1.0], kind="indicator",
                            random_factor=random_factor)

    @classmethod
    def linear(cls, random_factor: bool = False) -> "LossMap":
        return cls.from_psi([0.0, 1.0], [0.0, 1.0], kind="linear", random_factor=random_factor)

    @classmethod
    def power_loss(cls, q: float, n_knots: int = 201, random_factor: bool = False) -> "LossMap":
        """Shortfall loss Psi(y) = 1 - (1 - y)^q on a uniform knot grid."""
        if q < 1.0:
            raise StructuralError("power loss needs q >= 1")
        y = np.linspace(0.0, 1.0, n_knots)
        v = 1.0 - (1.0 - y) ** q
        v[-1] = 1.0
        return cls.from_psi(y, v, kind="power_loss", q=float(q), random_factor=random_factor)

    # evaluation -------------------------------------------------------------
    def phi(self, m) -> np.ndarray:
        return eval_left_continuous(self.phi_m, self.phi_v, m)

    def psi(self, y) -> np.ndarray:
        if self.psi_y is None:
            raise StructuralError("Psi is unavailable for a non-monotone Phi")
        y = np.asarray(y, dtype=float)
        # the constraint normalization makes Psi equal 1 from y = 1 on
        return np.where(y >= 1.0, 1.0, eval_right_continuous(self.psi_y, self.psi_v, y))

    @property
    def knots(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct knot positions of Phi with their (left-continuous) values."""
        m = np.unique(self.phi_m)
        return m, self.phi(m)


# ---------------------------------------------------------------------------
# drivers


@dataclass(frozen=True)
class Driver:
    """BSDE generator ``g(t, y, z)``, vectorized over paths.

    ``func(t, y, z)`` receives ``y`` of shape ``(n,)`` and ``z`` of shape
    ``(n, d)``.  ``dual_lo``/``dual_hi`` bound the domain of the conjugate
    ``g~`` (a box inside ``[-K_g, K_g]^{d+1}``); ``conjugate`` optionally gives
    ``g~(t, u, v)`` in closed form.
    """

    func: Callable
    K_g: float
    chi_g: float
    form: str = "convex_custom"
    a_y: float = 0.0
    a_z: Optional[np.ndarray] = None
    g0: float = 0.0
    dual_lo: Optional[np.ndarray] = None
    dual_hi: Optional[np.ndarray] = None
    conjugate: Optional[Callable] = None
    label: str = "custom"

    def __post_init__(self):
        if self.form not in DRIVER_FORMS:
            raise StructuralError(f"unknown driver form {self.form!r}")
        if self.K_g < 0 or self.chi_g < 0:
            raise StructuralError("K_g and chi_g must be non-negative")
        if self.a_z is not None:
            object.__setattr__(self, "a_z", _frozen(np.atleast_1d(self.a_z)))
        for name in ("dual_lo", "dual_hi"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(np.atleast_1d(val)))

    def __call__(self, t, y, z) -> np.ndarray:
        return self.func(t, np.asarray(y, dtype=float), np.atleast_2d(np.asarray(z, dtype=float)))

    @property
    def is_linear(self) -> bool:
        return self.form in ("zero", "linear")

    @property
    def lam(self) -> tuple[float, np.ndarray]:
        """The unique dual control (A_Y, A_Z) of a linear driver."""
        if not self.is_linear:
            raise ValueError("only linear drivers have a singleton dual domain")
        return self.a_y, np.array(self.a_z)

    @classmethod
    def zero(cls, d: int = 1) -> "Driver":
        return cls.linear(0.0, np.zeros(d), 0.0, form="zero")

    @classmethod
    def linear(cls, a_y: float, a_z, g0: float = 0.0, form: str = "linear") -> "Driver":
        """``g(t, y, z) = g0 + a_y y + a_z . z``."""
        a_z = np.atleast_1d(np.asarray(a_z, dtype=float))
        a_y = float(a_y)
        g0 = float(g0)

        def func(t, y, z):
            # evaluation order matches the dual relation nu*y + theta.z - g~ bit for bit
            return g0 + (a_y * y + z @ a_z)

        lam = np.concatenate([[a_y], a_z])
        return cls(func, K_g=float(max(abs(a_y), np.linalg.norm(a_z))),
                   chi_g=abs(g0), form=form, a_y=a_y, a_z=a_z, g0=g0,
                   dual_lo=lam, dual_hi=lam, label=form)

    @classmethod
    def abs_z(cls, kappa: float, a_y: float = 0.0, a_z=0.0) -> "Driver":
        """Convex driver ``g = a_y y + a_z . z + kappa |z|`` (dual domain {a_y} x ball)."""
        a_z = np.atleast_1d(np.asarray(a_z, dtype=float))
        kappa = float(kappa)
        a_y = float(a_y)
        if kappa < 0:
            raise StructuralError("kappa must be non-negative")

        def func(t, y, z):
            return a_y * y + z @ a_z + kappa * np.linalg.norm(z, axis=1)

        def conj(t, u, v):
            v = np.atleast_1d(v)
            inside = abs(u - a_y) <= 1e-12 and np.linalg.norm(v - a_z) <= kappa + 1e-12
            return 0.0 if inside else np.inf

        lo = np.concatenate([[a_y], a_z - kappa])
        hi = np.concatenate([[a_y], a_z + kappa])
        K = max(abs(a_y), float(np.linalg.norm(a_z)) + kappa)
        return cls(func, K_g=K, chi_g=0.0, form="convex_custom", a_y=a_y, a_z=a_z,
                   dual_lo=lo, dual_hi=hi, conjugate=conj, label="abs")

    @classmethod
    def custom(cls, func, K_g, chi_g=0.0, dual_lo=None, dual_hi=None, conjugate=None,
               label="custom") -> "Driver":
        return cls(func, K_g=float(K_g), chi_g=float(chi_g), form="convex_custom",
                   dual_lo=dual_lo, dual_hi=dual_hi, conjugate=conjugate, label=label)


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class MarketModel:
    """Geometric Brownian asset driven by the first Brownian component."""

    s0: float = 1.0
    sigma: float = 0.2
    drift: float = 0.0
    rate: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.s0 <= 0:
            raise StructuralError("market needs s0 > 0 and sigma > 0")


@dataclass(frozen=True)
class ClaimSpec:
    """Claim factor xi in Phi(omega, m) = phi(m) xi(omega)."""

    kind: str = "constant"
    strike: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in CLAIM_KINDS:
            raise StructuralError(f"unknown claim kind {self.kind!r}")

    def payoff(self, s_T: Optional[np.ndarray], n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.scale)
        if s_T is None:
            raise StructuralError(f"claim {self.kind!r} needs a market model")
        if self.kind == "digital":
            return self.scale * (s_T >= self.strike).astype(float)
        return self.scale * np.maximum(s_T - self.strike, 0.0)


@dataclass(frozen=True)
class ProblemSpec:
    loss: LossMap
    driver: Driver
    horizon_T: float = 1.0
    brownian_dim_d: int = 1
    market: Optional[MarketModel] = None
    claim: ClaimSpec = field(default_factory=ClaimSpec)
    m_grid: tuple = tuple(np.round(np.linspace(0.0, 1.0, 11), 12))

    def __post_init__(self):
        if self.horizon_T <= 0:
            raise StructuralError("horizon_T must be positive")
        if self.brownian_dim_d < 1:
            raise StructuralError("brownian_dim_d must be >= 1")
        object.__setattr__(self, "m_grid", tuple(float(x) for x in self.m_grid))

    @property
    def T(self) -> float:
        return self.horizon_T

    @property
    def d(self) -> int:
        return self.brownian_dim_d

    def replace(self, **changes) -> "ProblemSpec":
        from dataclasses import replace
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    where: Optional[tuple] = None

    def __str__(self):
        loc = "" if self.where is None else f" at {self.where}"
        return f"{self.code}: {self.message}{loc}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def __bool__(self):
        return self.ok

    def __iter__(self):
        return iter(self.violations)


def _loss_violations(loss: LossMap) -> list[Violation]:
    out = []
    m, v = loss.phi_m, loss.phi_v
    bad = np.flatnonzero((v < -INVERSE_TOL) | (v > 1 + INVERSE_TOL))
    if bad.size:
        i = int(bad[0])
        out.append(Violation("phi_range", "Φ out of [0,1]", (float(m[i]), float(v[i]))))
    dec = np.flatnonzero(np.diff(v) < -INVERSE_TOL)
    if dec.size:
        i = int(dec[0])
        out.append(Violation("phi_monotone", "Φ not non-decreasing", (float(m[i + 1]), float(v[i + 1]))))
    if loss.psi_y is None:
        return out
    y, pv = loss.psi_y, loss.psi_v
    bad = np.flatnonzero((pv < -INVERSE_TOL) | (pv > 1 + INVERSE_TOL))
    if bad.size:
        i = int(bad[0])
        out.append(Violation("psi_range", "Ψ out of [0,1]", (float(y[i]), float(pv[i]))))
    dec = np.flatnonzero(np.diff(pv) < -INVERSE_TOL)
    if dec.size:
        i = int(dec[0])
        out.append(Violation("psi_monotone", "Ψ not non-decreasing", (float(y[i + 1]), float(pv[i + 1]))))
    if out:
        return out
    # inverse-pair relation Phi(Psi(y)) <= y and Psi(Phi(m)) >= m at every node
    yy = np.unique(np.concatenate([y, np.linspace(0, 1, 101)]))
    ps = loss.psi(yy)
    fin = np.isfinite(ps)
    lhs = loss.phi(np.clip(ps[fin], 0, 1))
    err = lhs - yy[fin]
    if np.any(err > INVERSE_TOL * np.maximum(1.0, np.abs(yy[fin]))):
        i = int(np.argmax(err))
        out.append(Violation("inverse_pair", "Φ(Ψ(y)) > y", (float(yy[fin][i]),)))
    mm = np.unique(np.concatenate([m, np.linspace(0, 1, 101)]))
    back = loss.psi(loss.phi(mm))
    err = mm - back
    if np.any(err > INVERSE_TOL * np.maximum(1.0, mm)):
        i = int(np.argmax(err))
        out.append(Violation("inverse_pair", "Ψ(Φ(m)) < m", (float(mm[i]),)))
    return out


def _driver_violations(driver: Driver, T: float, d: int, n_lattice: int) -> list[Violation]:
    out = []
    ts = np.linspace(0.0, T, n_lattice)
    grid = np.linspace(-2.0, 2.0, n_lattice)
    rel = 1.0 + 1e-9
    # |g(t, 0, 0)| <= chi_g
    g00 = np.array([driver(t, np.zeros(1), np.zeros((1, d)))[0] for t in ts])
    if np.any(np.abs(g00) > driver.chi_g * rel + 1e-12):
        i = int(np.argmax(np.abs(g00)))
        out.append(Violation("chi_bound", "|g(t,0,0)| exceeds chi_g", (float(ts[i]),)))
    # difference quotients along y and along each z axis on the (t, y, z) lattice
    Y, Z = np.meshgrid(grid, grid, indexing="ij")
    y_flat, z_flat = Y.ravel(), Z.ravel()
    worst = (0.0, None)
    for t in ts:
        for axis in range(d):
            zz = np.zeros((y_flat.size, d))
            zz[:, axis] = z_flat
            g = driver(t, y_flat, zz).reshape(Y.shape)
            h = grid[1] - grid[0]
            qy = np.abs(np.diff(g, axis=0)) / h
            qz = np.abs(np.diff(g, axis=1)) / h
            for q, ax in ((qy, 0), (qz, 1)):
                k = np.unravel_index(np.argmax(q), q.shape)
                if q[k] > worst[0]:
                    worst = (float(q[k]), (float(t), float(Y[k]), float(Z[k]), "y" if ax == 0 else f"z{axis}"))
    if worst[0] > driver.K_g * rel + 1e-12:
        out.append(Violation("lipschitz", f"Lipschitz bound exceeded (quotient {worst[0]:.4g} > K_g={driver.K_g:.4g})",
                             worst[1]))
    return out


def validate_spec(spec: ProblemSpec, n_lattice: int = 101, require_endpoints: bool = False) -> ValidationReport:
    """Check the standing assumptions on loss map, driver and threshold grid.

    Structural problems (malformed knots) raise :class:`StructuralError` when the
    objects are built; this function only reports assumption violations.
    """
    violations = _loss_violations(spec.loss)
    if spec.driver.a_z is not None and spec.driver.a_z.size != spec.d:
        violations.append(Violation("dimension", "driver a_z dimension differs from d"))
    else:
        violations += _driver_violations(spec.driver, spec.T, spec.d, n_lattice)
    mg = np.asarray(spec.m_grid, dtype=float)
    if mg.size:
        if np.any(np.diff(mg) <= 0):
            violations.append(Violation("m_grid", "m_grid not strictly increasing"))
        if mg[0] < 0 or mg[-1] > 1:
            violations.append(Violation("m_grid", "m_grid outside [0,1]"))
        if require_endpoints and (mg[0] != 0.0 or mg[-1] != 1.0):
            violations.append(Violation("m_grid", "m_grid misses an endpoint"))
    if spec.claim.kind != "constant" and spec.market is None:
        violations.append(Violation("claim", "asset-dependent claim without market model"))
    return ValidationReport(tuple(violations))
