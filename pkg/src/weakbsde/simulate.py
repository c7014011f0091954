"""Seeded Brownian ensembles and the controlled processes evolved on them.

Random numbers come from the counter-based Philox generator keyed by
``(seed, block)``.  Paths are generated in fixed blocks of ``BLOCK`` paths, so
path ``i`` is the same whatever the number of worker threads or the total
number of paths requested.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .problem import ProblemSpec

BLOCK = 4096
CLAMP_K = 4.0
THREADS_ENV = "WEAKBSDE_THREADS"


class ControlError(RuntimeError):
    """A control policy produced non-finite values."""


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def _block_normals(seed: int, block: int, n_steps: int, d: int) -> np.ndarray:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, block], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((BLOCK, n_steps, d))


def brownian_increments(n_paths: int, n_steps: int, d: int, dt: float, seed: int,
                        threads: Optional[int] = None) -> np.ndarray:
    """Gaussian increments of variance ``dt``, shape ``(n_paths, n_steps, d)``."""
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be >= 1")
    n_blocks = -(-n_paths // BLOCK)
    out = np.empty((n_paths, n_steps, d))
    sq = np.sqrt(dt)

    def fill(b):
        lo = b * BLOCK
        hi = min(lo + BLOCK, n_paths)
        out[lo:hi] = _block_normals(seed, b, n_steps, d)[: hi - lo] * sq

    workers = resolve_threads(threads)
    if workers == 1 or n_blocks == 1:
        for b in range(n_blocks):
            fill(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n_blocks)))
    out.setflags(write=False)
    return out


@dataclass
class PathEnsemble:
    """Brownian increments plus derived channels (asset ``S``, claim ``xi``).

    Arrays are read-only once built; the cumulative Brownian motion is built
    lazily and cached.
    """

    n_paths: int
    n_steps: int
    T: float
    d: int
    seed: int
    dW: np.ndarray
    channels: dict = field(default_factory=dict)
    t0: float = 0.0
    _W: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def W(self) -> np.ndarray:
        """Brownian paths, shape ``(n_paths, n_steps + 1, d)``, starting at 0."""
        if self._W is None:
            W = np.zeros((self.n_paths, self.n_steps + 1, self.d))
            np.cumsum(self.dW, axis=1, out=W[:, 1:])
            W.setflags(write=False)
            self._W = W
        return self._W

    @property
    def W_T(self) -> np.ndarray:
        return self.W[:, -1]

    @property
    def xi(self) -> np.ndarray:
        return self.channels["xi"]

    @property
    def S(self) -> Optional[np.ndarray]:
        return self.channels.get("S")

    @property
    def signature(self) -> tuple:
        return (self.seed, self.n_paths, self.n_steps, self.d, self.T, self.t0)

    def window(self, k0: int, k1: Optional[int] = None) -> "PathEnsemble":
        """Sub-ensemble on steps ``[k0, k1)`` with the Brownian motion restarted at 0.

        The asset channel keeps its level at step ``k0`` (it is the state the
        sub-problem starts from); the claim channel is carried over.
        """
        k1 = self.n_steps if k1 is None else k1
        if not 0 <= k0 < k1 <= self.n_steps:
            raise ValueError("invalid window")
        ch = {}
        if "S" in self.channels:
            ch["S"] = self.channels["S"][:, k0:k1 + 1]
        if "xi" in self.channels and k1 == self.n_steps:
            ch["xi"] = self.channels["xi"]
        return PathEnsemble(self.n_paths, k1 - k0, (k1 - k0) * self.dt, self.d, self.seed,
                            self.dW[:, k0:k1], ch, t0=self.t0 + k0 * self.dt)

    def with_claim(self, xi: np.ndarray) -> "PathEnsemble":
        ch = dict(self.channels)
        ch["xi"] = np.asarray(xi, dtype=float)
        return PathEnsemble(self.n_paths, self.n_steps, self.T, self.d, self.seed, self.dW, ch,
                            t0=self.t0, _W=self._W)


def generate_paths(spec: ProblemSpec, n_paths: int, n_steps: int, seed: int,
                   threads: Optional[int] = None) -> PathEnsemble:
    """Simulate the ensemble for ``spec``: increments, asset (exact log-Euler) and claim."""
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be >= 1")
    dt = spec.T / n_steps
    dW = brownian_increments(n_paths, n_steps, spec.d, dt, seed, threads)
    ens = PathEnsemble(n_paths, n_steps, spec.T, spec.d, seed, dW)
    s_T = None
    if spec.market is not None:
        mk = spec.market
        incr = (mk.drift - 0.5 * mk.sigma ** 2) * dt + mk.sigma * dW[:, :, 0]
        logS = np.empty((n_paths, n_steps + 1))
        logS[:, 0] = np.log(mk.s0)
        np.cumsum(incr, axis=1, out=logS[:, 1:])
        logS[:, 1:] += np.log(mk.s0)
        S = np.exp(logS)
        S.setflags(write=False)
        ens.channels["S"] = S
        s_T = S[:, -1]
    xi = spec.claim.payoff(s_T, n_paths)
    xi.setflags(write=False)
    ens.channels["xi"] = xi
    return ens


# ---------------------------------------------------------------------------
# control martingale


@dataclass(frozen=True)
class ControlPolicy:
    """Feedback rule ``alpha = rule(t, features, M)`` returning shape ``(n, d)``.

    ``features`` holds the current Brownian position ``W`` and asset ``S``.
    """

    rule: Callable
    parameters: np.ndarray = field(default_factory=lambda: np.empty(0))
    clamp_k: float = CLAMP_K

    def __call__(self, t, features, M):
        return self.rule(t, features, M)

    @classmethod
    def constant(cls, alpha) -> "ControlPolicy":
        a = np.atleast_1d(np.asarray(alpha, dtype=float))
        return cls(lambda t, f, M: np.broadcast_to(a, (M.size, a.size)), a)

    @classmethod
    def zero(cls, d: int = 1) -> "ControlPolicy":
        return cls.constant(np.zeros(d))


def clamp_control(alpha: np.ndarray, M: np.ndarray, dt: float, k: float = CLAMP_K) -> np.ndarray:
    """Scale ``alpha`` so that ``|alpha| <= min(M, 1 - M) / (k sqrt(dt d))``."""
    d = alpha.shape[1]
    bound = np.minimum(M, 1.0 - M) / (k * np.sqrt(dt * d))
    norm = np.linalg.norm(alpha, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > bound, bound / np.where(norm > 0, norm, 1.0), 1.0)
    return alpha * np.maximum(scale, 0.0)[:, None]


def evolve_control(ens: PathEnsemble, m0: float, policy: ControlPolicy) -> np.ndarray:
    """Euler scheme for ``M = m0 + int alpha dW`` kept in [0, 1].

    The integrand is clamped near the boundary, the state projected onto [0, 1],
    and paths that touch 0 or 1 stay there.

    Returns:
        Array of shape ``(n_paths, n_steps + 1)``.
    """
    if not 0.0 <= m0 <= 1.0:
        raise ValueError("m0 must lie in [0, 1]")
    n, K, dt = ens.n_paths, ens.n_steps, ens.dt
    out = np.empty((n, K + 1))
    M = np.full(n, float(m0))
    out[:, 0] = M
    absorbed = (M <= 0.0) | (M >= 1.0)
    W = ens.W
    S = ens.S
    for k in range(K):
        feats = {"W": W[:, k], "S": None if S is None else S[:, k], "k": k}
        alpha = np.array(policy(ens.times[k], feats, M), dtype=float, copy=True)
        alpha = np.broadcast_to(alpha, (n, ens.d)) if alpha.ndim < 2 else alpha
        if not np.all(np.isfinite(alpha)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(alpha), axis=1))[0])
            raise ControlError(f"policy returned a non-finite alpha on path {bad} at step {k}")
        alpha = clamp_control(alpha, M, dt, policy.clamp_k)
        alpha[absorbed] = 0.0
        M = np.clip(M + np.einsum("nd,nd->n", alpha, ens.dW[:, k]), 0.0, 1.0)
        absorbed |= (M <= 0.0) | (M >= 1.0)
        out[:, k + 1] = M
    return out


# ---------------------------------------------------------------------------
# deflator


def _check_dual(nu, theta, K_g):
    if K_g is None:
        return
    if np.any(np.abs(nu) > K_g + 1e-12) or np.any(np.abs(theta) > K_g + 1e-12):
        raise ValueError("dual control outside dual domain [-K_g, K_g]^{d+1}")


def evolve_deflator(ens: PathEnsemble, nu=0.0, theta=None, K_g: Optional[float] = None,
                    feedback: Optional[Callable] = None) -> np.ndarray:
    """``L = 1 + int L nu ds + int L theta dW`` on every path.

    Constant ``(nu, theta)`` use the exact exponential; a ``feedback(t, W_t)``
    returning ``(nu, theta)`` arrays is integrated on log scale.

    Returns:
        Array of shape ``(n_paths, n_steps + 1)``.
    """
    d = ens.d
    if feedback is None:
        nu = float(nu)
        theta = np.zeros(d) if theta is None else np.atleast_1d(np.asarray(theta, dtype=float))
        _check_dual(nu, theta, K_g)
        t = ens.times - ens.t0
        logL = (nu - 0.5 * theta @ theta) * t[None, :] + ens.W @ theta
        return np.exp(logL)
    n, K, dt = ens.n_paths, ens.n_steps, ens.dt
    logL = np.zeros((n, K + 1))
    W = ens.W
    for k in range(K):
        nu_k, th_k = feedback(ens.times[k], W[:, k])
        nu_k = np.broadcast_to(np.asarray(nu_k, dtype=float), (n,))
        th_k = np.broadcast_to(np.asarray(th_k, dtype=float), (n, d))
        _check_dual(nu_k, th_k, K_g)
        logL[:, k + 1] = logL[:, k] + (nu_k - 0.5 * np.sum(th_k ** 2, axis=1)) * dt \
            + np.einsum("nd,nd->n", th_k, ens.dW[:, k])
    return np.exp(logL)


def deflator_for(ens: PathEnsemble, driver) -> np.ndarray:
    """Deflator of a linear driver, ``lambda = (A_Y, A_Z)``."""
    a_y, a_z = driver.lam
    return evolve_deflator(ens, a_y, a_z)


N_BATCHES = 16


def batch_slices(n_paths: int, n_batches: int = N_BATCHES) -> list[slice]:
    """Fixed contiguous batches (the last ones absorb the remainder)."""
    n_batches = max(1, min(n_batches, n_paths))
    edges = np.linspace(0, n_paths, n_batches + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def batch_stderr(samples: np.ndarray, n_batches: int = N_BATCHES) -> float:
    """Standard error of the mean from batch means over fixed batches."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return 0.0
    means = np.array([samples[s].mean() for s in batch_slices(samples.size, n_batches)])
    if means.size < 2:
        return 0.0
    return float(means.std(ddof=1) / np.sqrt(means.size))
