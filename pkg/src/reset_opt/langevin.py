"""One-dimensional drift-diffusion search with Poissonian resetting.

The searcher starts at the origin, diffuses with coefficient ``D`` and drift
``v`` and is absorbed at ``L > 0``. With rate ``gamma`` it is sent back to
the origin. Closed forms::

    laplace(gamma) = exp((L / 2D) (v - sqrt(v^2 + 4 D gamma)))
    mfpt(gamma)    = (1 - laplace) / (gamma * laplace)
                   = (exp((L / 2D) (sqrt(v^2 + 4 D gamma) - v)) - 1) / gamma
    Pe             = L v / (2 D)      (resetting helps iff Pe <= 1)
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class StabilityWarning(RuntimeWarning):
    """Simulation time step is coarse relative to the problem scales."""


class BracketError(RuntimeError):
    """The optimal-rate scan did not bracket a minimum."""

    def __init__(self, message, scan):
        super().__init__(message)
        self.scan = scan


def _check_dl(D, L):
    if not D > 0:
        raise ValueError("diffusion coefficient D must be positive")
    if not L > 0:
        raise ValueError("target distance L must be positive")


def _exponent(D, v, L, gamma):
    """``(L / 2D)(sqrt(v^2 + 4 D gamma) - v)`` without cancellation."""
    s = math.sqrt(v * v + 4.0 * D * gamma)
    if v > 0:
        return 2.0 * L * gamma / (s + v)
    return L * (s - v) / (2.0 * D)


def laplace_fpt(D: float, v: float, L: float, gamma: float) -> float:
    """Laplace transform of the reset-free first-passage density at ``gamma``."""
    _check_dl(D, L)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        # total absorption probability; < 1 when drifting away
        return 1.0 if v >= 0 else math.exp(L * v / D)
    return math.exp(-_exponent(D, v, L, gamma))


def mfpt_renewal(laplace_value: float, gamma: float) -> float:
    """Mean first-passage time under resetting from any FPT Laplace transform."""
    if not laplace_value > 0:
        raise ValueError("Laplace transform value must be positive")
    if laplace_value > 1:
        raise ValueError("Laplace transform value cannot exceed 1")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return math.expm1(-math.log(laplace_value)) / gamma


def mfpt_closed_form(D: float, v: float, L: float, gamma: float) -> float:
    """Mean first-passage time with reset rate ``gamma``.

    ``gamma = 0`` gives ``L / v`` for ``v > 0`` and ``inf`` otherwise.
    """
    _check_dl(D, L)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        return L / v if v > 0 else math.inf
    a = _exponent(D, v, L, gamma)
    if a > 700:
        return math.inf
    return math.expm1(a) / gamma


def mfpt_curve(D, v, L, gammas) -> np.ndarray:
    return np.array([mfpt_closed_form(D, v, L, float(g)) for g in gammas])


def propagator_density(D: float, v: float, L: float, x, t: float):
    """Density of surviving searchers at ``x <= L`` at time ``t`` (no resetting)."""
    _check_dl(D, L)
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=np.float64)
    if np.any(x > L):
        raise ValueError("x must not exceed the absorbing boundary L")
    norm = 1.0 / math.sqrt(4.0 * math.pi * D * t)
    direct = np.exp(-(x - v * t) ** 2 / (4.0 * D * t))
    # image weight and Gaussian combined in the exponent to avoid overflow
    image = np.exp(L * v / D - (x - 2.0 * L - v * t) ** 2 / (4.0 * D * t))
    out = norm * (direct - image)
    return float(out) if out.ndim == 0 else out


def survival_probability(D: float, v: float, L: float, t: float) -> float:
    """Probability that the target has not been reached by ``t`` (quadrature)."""
    from scipy.integrate import quad

    spread = 12.0 * math.sqrt(2.0 * D * t) + abs(v) * t
    lo = min(-spread + v * t, -spread)
    val, _ = quad(lambda x: propagator_density(D, v, L, x, t), lo, L, limit=200)
    return val


def peclet(D: float, v: float, L: float) -> float:
    _check_dl(D, L)
    return L * v / (2.0 * D)


def reset_beneficial(D: float, v: float, L: float) -> bool:
    return peclet(D, v, L) <= 1.0


def golden_section(f: Callable[[float], float], a: float, b: float,
                   tol: float = 1e-10, max_iter: int = 500) -> tuple:
    """Minimize a unimodal ``f`` on ``[a, b]``; returns ``(x, f(x))``."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


@dataclass(frozen=True)
class OptimalRate:
    gamma: float
    mfpt: float
    interior: bool
    peclet: float
    mfpt_no_reset: float
    scan_gammas: tuple = field(default=(), repr=False)
    scan_mfpt: tuple = field(default=(), repr=False)

    @property
    def improvement_ratio(self) -> float:
        """``mfpt(0) / mfpt(gamma*)``; infinite when the reset-free MFPT diverges."""
        return self.mfpt_no_reset / self.mfpt


def optimal_reset_rate(D: float, v: float, L: float, rtol: float = 1e-6,
                       decades: float = 6.0, points_per_decade: int = 20) -> OptimalRate:
    """Reset rate minimizing the closed-form MFPT.

    A log-spaced scan over ``(D / L^2) * [10^-decades, 10^decades]`` brackets
    the minimum; golden-section search in ``log(gamma)`` then refines it to
    relative tolerance ``rtol``. If the smallest scanned rate is best (no
    interior minimum, e.g. ``Pe > 1``) the result has ``gamma = 0`` and
    ``interior = False``.
    """
    _check_dl(D, L)
    pe = peclet(D, v, L)
    scale = D / L ** 2
    n = int(2 * decades * points_per_decade) + 1
    grid = scale * np.logspace(-decades, decades, n)
    values = mfpt_curve(D, v, L, grid)
    t0 = mfpt_closed_form(D, v, L, 0.0)
    i = int(np.argmin(values))
    if i == 0 and values[0] >= t0:
        return OptimalRate(0.0, t0, False, pe, t0, tuple(grid), tuple(values))
    if i in (0, n - 1):
        raise BracketError(f"minimum of the MFPT not bracketed (index {i} of {n})",
                           list(zip(grid.tolist(), values.tolist())))
    f = lambda u: mfpt_closed_form(D, v, L, math.exp(u))  # noqa: E731
    u, t = golden_section(f, math.log(grid[i - 1]), math.log(grid[i + 1]), tol=rtol / 10)
    return OptimalRate(math.exp(u), t, True, pe, t0, tuple(grid), tuple(values))


def improvement_ratio(D: float, v: float, L: float) -> float:
    return optimal_reset_rate(D, v, L).improvement_ratio


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class LangevinConfig:
    """Simulation settings; ``max_time=None`` means 1000x the closed-form MFPT.

    ``bridge`` adds the Brownian-bridge crossing probability between grid
    points, which removes the O(sqrt(dt)) overshoot bias of checking the
    boundary only at step ends.
    """

    D: float
    v: float
    L: float
    gamma: float = 0.0
    dt: float = 1e-3
    max_time: Optional[float] = None
    bridge: bool = True
    reset_point: float = 0.0

    def __post_init__(self):
        if self.D < 0 or not self.L > 0 or not self.dt > 0 or self.gamma < 0:
            raise ValueError("need D >= 0, L > 0, dt > 0 and gamma >= 0")
        if self.reset_point != 0.0:
            raise ValueError("the reset point is the origin")

    @property
    def reset_probability(self) -> float:
        """Per-step reset probability ``r = gamma * dt``."""
        return self.gamma * self.dt

    def stable(self) -> bool:
        return (self.gamma * self.dt < 0.1
                and abs(self.v) * self.dt + 3.0 * math.sqrt(2.0 * self.D * self.dt) < self.L / 10.0)

    def horizon(self) -> float:
        if self.max_time is not None:
            return float(self.max_time)
        if self.D == 0:
            if self.v > 0:
                return 1e3 * self.L / self.v
            raise ValueError("max_time is required when the target is unreachable")
        closed = mfpt_closed_form(self.D, self.v, self.L, self.gamma)
        if not math.isfinite(closed):
            raise ValueError("max_time is required when the closed-form MFPT is infinite")
        return 1e3 * closed


@dataclass
class FptBatch:
    samples: np.ndarray
    censored: int
    n_trajectories: int
    seed: int
    max_time: float

    @property
    def all_censored(self) -> bool:
        return self.censored == self.n_trajectories


@dataclass
class MfptResult:
    estimate: float
    std_error: float
    n_effective: int
    closed_form: float
    relative_gap: float
    censored: int = 0

    @property
    def flagged(self) -> bool:
        return self.censored > 0


def simulate_fpt(cfg: LangevinConfig, n_trajectories: int, seed: int = 0,
                 block: int = 1 << 16, check_stability: bool = True) -> FptBatch:
    """First-passage times of ``n_trajectories`` independent searchers.

    Per step, with probability ``gamma * dt`` the searcher jumps to the
    origin; otherwise it moves by ``v dt + sqrt(2 D dt) N(0, 1)``. Absorbed
    when it reaches ``L``. Trajectories are simulated in fixed-size blocks,
    each with its own stream ``default_rng([seed, block_index])``.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    if check_stability and not cfg.stable():
        warnings.warn("coarse time step: gamma*dt < 0.1 and |v| dt + 3 sqrt(2 D dt) < L / 10 "
                      "do not both hold", StabilityWarning, stacklevel=2)
    horizon = cfg.horizon()
    max_steps = int(math.ceil(horizon / cfg.dt - 1e-9))
    p_reset = cfg.gamma * cfg.dt
    sigma = math.sqrt(2.0 * cfg.D * cfg.dt)
    drift = cfg.v * cfg.dt
    use_bridge = cfg.bridge and cfg.D > 0
    out = []
    censored = 0
    for b, start in enumerate(range(0, n_trajectories, block)):
        m = min(block, n_trajectories - start)
        rng = np.random.default_rng([seed, b])
        x = np.zeros(m)
        times = np.full(m, np.nan)
        alive = np.arange(m)
        k = 0
        while alive.size and k < max_steps:
            k += 1
            size = alive.size
            reset = rng.random(size) < p_reset if p_reset > 0 else np.zeros(size, dtype=bool)
            moved = x + drift + sigma * rng.standard_normal(size) if sigma > 0 else x + drift
            new = np.where(reset, 0.0, moved)
            hit = (~reset) & (new >= cfg.L)
            if use_bridge:
                u = rng.random(size)
                gap = np.maximum(cfg.L - x, 0.0) * np.maximum(cfg.L - new, 0.0)
                hit |= (~reset) & (u < np.exp(-gap / (cfg.D * cfg.dt)))
            if hit.any():
                times[alive[hit]] = k * cfg.dt
                keep = ~hit
                alive = alive[keep]
                x = new[keep]
            else:
                x = new
        censored += int(alive.size)
        out.append(times[~np.isnan(times)])
    samples = np.concatenate(out) if out else np.zeros(0)
    return FptBatch(samples, censored, n_trajectories, seed, horizon)


def empirical_laplace(batch: FptBatch, gamma: float) -> float:
    """``mean(exp(-gamma T))`` with censored trajectories contributing zero."""
    return float(np.exp(-gamma * batch.samples).sum() / batch.n_trajectories)


def mfpt_estimate(cfg: LangevinConfig, n_trajectories: int, seed: int = 0, **kwargs) -> MfptResult:
    """Monte Carlo MFPT paired with the closed form.

    The estimate averages the absorbed trajectories; ``censored`` counts
    those that hit ``max_time`` (estimate is then biased low and flagged).
    """
    batch = simulate_fpt(cfg, n_trajectories, seed, **kwargs)
    n = batch.samples.size
    closed = mfpt_closed_form(cfg.D, cfg.v, cfg.L, cfg.gamma) if cfg.D > 0 else (
        cfg.L / cfg.v if cfg.v > 0 else math.inf)
    if n == 0:
        return MfptResult(math.nan, math.nan, 0, closed, math.nan, batch.censored)
    est = float(batch.samples.mean())
    se = float(batch.samples.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    gap = (est - closed) / closed if math.isfinite(closed) else math.nan
    return MfptResult(est, se, n, closed, gap, batch.censored)
