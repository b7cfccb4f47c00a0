"""Analytic phase-boundary machinery.

The per-letter infection weights solve the algebraic fixed-point system

    F_i = z p_i - z p_i F_i^2 + F_i * sum_j z p_j F_j     (j over all 2d letters)

with symmetric weights p_i = p_inv(i) and a scale z.  The minimal
nonnegative solution is reached by monotone iteration from zero; the
iteration map's Jacobian is the matrix J with

    J_ii = 2 sum_{k in A+} z p_k F_k,     J_ij = 2 z p_j F_i  (i != j),

whose spectral radius gamma crosses 1 exactly at the singularity z = R of
the solution branch.  At the singularity the solution satisfies
sum_i F_i^2/(1+F_i^2) = 1 over the full alphabet, and the two boundary
identities q1, q2 below are scale-free in the solution values.

The physical infection rates enter only through the products z p_i, up to
an undetermined proportionality, so ray scans in analytic mode report
boundary locations in this (p, z) scale; Monte Carlo mode measures the
physical rates directly and the two are reported side by side without
forcing agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cayley import ParameterError
from .spectral import NonConvergenceError, power_iteration

_F_TOL = 1e-12
_DIVERGE_BOUND = 1.5  # the physical branch stays within [0, 1]


@dataclass(frozen=True)
class BrwParams:
    """Symmetric offspring weights (d free entries) and the scale z."""

    p: tuple
    z: float

    def __post_init__(self):
        if len(self.p) < 1:
            raise ParameterError("need at least one weight")
        for v in self.p:
            if v < 0 or not math.isfinite(v):
                raise ParameterError("weights must be finite and >= 0")
        if max(self.p) <= 0:
            raise ParameterError("at least one weight must be positive")
        if self.z < 0 or not math.isfinite(self.z):
            raise ParameterError("z must be finite and >= 0")
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))

    @property
    def d(self) -> int:
        return len(self.p)

    @property
    def expanded(self) -> tuple:
        return self.p + self.p


@dataclass
class BrwSolution:
    F: tuple  # d values, one per generator pair
    z: float
    converged: bool
    diverged: bool
    iterations: int
    residual: float
    gamma: float

    @property
    def expanded(self) -> tuple:
        return self.F + self.F


def _iterate_map(F: np.ndarray, p: np.ndarray, z: float) -> np.ndarray:
    S = 2.0 * z * float(p @ F)
    return z * p - z * p * F * F + F * S


def _system_residual(F: np.ndarray, p: np.ndarray, z: float) -> np.ndarray:
    return F - _iterate_map(F, p, z)


def jacobian(p: Sequence[float], z: float, F: Sequence[float]) -> np.ndarray:
    """The d x d matrix J at a solution point."""
    p = np.asarray(p, dtype=float)
    F = np.asarray(F, dtype=float)
    d = len(p)
    S = 2.0 * z * float(p @ F)
    J = 2.0 * z * np.outer(F, p)
    np.fill_diagonal(J, S)
    return J


def jacobian_gamma(params: BrwParams, F: Sequence[float]) -> float:
    """Spectral radius of J at the fixed point, via power iteration."""
    J = jacobian(params.p, params.z, F)
    if np.all(J == 0):
        return 0.0
    theta, _, _ = power_iteration(J, tol=1e-13)
    return theta


def solve_F(
    params: BrwParams,
    tol: float = _F_TOL,
    max_iter: int = 200_000,
) -> BrwSolution:
    """Minimal nonnegative fixed point by monotone iteration plus Newton polish.

    Iterates from F = 0 (each sweep increases every component toward the
    minimal root).  Once the sweep change is small the d x d Newton step
    finishes to full precision.  Iterate growth beyond the physical branch
    flags z as beyond the singularity.
    """
    p = np.asarray(params.p, dtype=float)
    z = params.z
    d = len(p)
    F = np.zeros(d)
    if z == 0.0:
        return BrwSolution(tuple(F), z, True, False, 0, 0.0, 0.0)

    it = 0
    change = math.inf
    while it < max_iter:
        Fn = _iterate_map(F, p, z)
        change = float(np.max(np.abs(Fn - F)))
        F = Fn
        it += 1
        if float(np.max(F)) > _DIVERGE_BOUND:
            return BrwSolution(tuple(F), z, False, True, it, math.nan, math.nan)
        if change < 1e-8:
            break

    # Newton polish; guarded so a near-singular Jacobian falls back to sweeps
    for _ in range(60):
        res = _system_residual(F, p, z)
        rnorm = float(np.max(np.abs(res)))
        if rnorm < tol:
            break
        A = np.eye(d) - jacobian(p, z, F)
        try:
            step = np.linalg.solve(A, res)
        except np.linalg.LinAlgError:
            step = None
        if step is not None:
            Fn = F - step
            if np.all(Fn >= -1e-15) and float(np.max(Fn)) < _DIVERGE_BOUND:
                new_rnorm = float(np.max(np.abs(_system_residual(Fn, p, z))))
                if new_rnorm < rnorm:
                    F = np.clip(Fn, 0.0, None)
                    it += 1
                    continue
        F = _iterate_map(F, p, z)
        it += 1
        if float(np.max(F)) > _DIVERGE_BOUND:
            return BrwSolution(tuple(F), z, False, True, it, math.nan, math.nan)

    rnorm = float(np.max(np.abs(_system_residual(F, p, z))))
    gamma = jacobian_gamma(params, F)
    return BrwSolution(tuple(F), z, rnorm < tol * 10, False, it, rnorm, gamma)


@dataclass
class SingularityResult:
    R: float
    F: tuple
    gamma: float
    identity_residual: float  # sum F^2/(1+F^2) - 1 over the full alphabet
    iterations: int


def _det_i_minus_j(F: np.ndarray, p: np.ndarray, z: float) -> float:
    d = len(p)
    return float(np.linalg.det(np.eye(d) - jacobian(p, z, F)))


def find_singularity(
    p: Sequence[float],
    z_cap: float = 1e6,
    tol: float = 1e-11,
) -> SingularityResult:
    """Locate R with gamma(R) = 1 on the solution branch of the system.

    Brackets the singularity by the divergence of the monotone iteration,
    then polishes (F, z) with Newton on the extended system
    {fixed point, det(I - J) = 0}, which is regular at the fold.
    """
    p_full = np.asarray(p, dtype=float)
    if np.any(p_full < 0) or not np.any(p_full > 0):
        raise ParameterError("weights must be >= 0 with a positive entry")
    active = np.flatnonzero(p_full > 0)
    pa = p_full[active]
    d_act = len(pa)
    d = len(p_full)

    # isotropic-equivalent initial scale: R*p = 1/(2 sqrt(2d-1)) when all equal
    p_mean = float(np.mean(pa))
    z0 = 1.0 / (2.0 * math.sqrt(max(2 * d - 1, 1)) * p_mean)

    def probe(z: float) -> BrwSolution:
        return solve_F(BrwParams(tuple(pa), z), max_iter=60_000)

    z_lo, z_hi = None, None
    z = z0
    for _ in range(200):
        sol = probe(z)
        if sol.diverged or (sol.converged and sol.gamma > 1.0):
            z_hi = z
            z *= 0.7
        elif sol.converged:
            z_lo = z
            break
        else:
            z *= 0.95  # slow zone next to the singularity; step down gently
        if z < 1e-12:
            raise NonConvergenceError("no convergent scale found")
    if z_lo is None:
        raise NonConvergenceError("no convergent scale found below the cap")
    while z_hi is None:
        z = z_lo * 1.6
        if z > z_cap:
            raise NonConvergenceError("no divergent scale found below the cap")
        sol = probe(z)
        if sol.diverged or (sol.converged and sol.gamma > 1.0):
            z_hi = z
        else:
            z_lo = z

    best = probe(z_lo)
    for _ in range(40):
        if z_hi - z_lo < max(1e-6 * z0, 1e-12):
            break
        mid = 0.5 * (z_lo + z_hi)
        sol = probe(mid)
        if sol.converged and sol.gamma <= 1.0:
            z_lo, best = mid, sol
        else:
            z_hi = mid
    if not best.converged:
        raise NonConvergenceError("bracketing produced no converged solution")

    # Newton on (F, z) for {F - T(F,z) = 0, det(I-J) = 0}
    x = np.concatenate([np.asarray(best.F), [z_lo]])
    n_unknown = d_act + 1

    def G(x: np.ndarray) -> np.ndarray:
        F, z = x[:-1], x[-1]
        return np.concatenate(
            [_system_residual(F, pa, z), [_det_i_minus_j(F, pa, z)]]
        )

    it_newton = 0
    for it_newton in range(1, 120):
        g = G(x)
        if float(np.max(np.abs(g))) < tol:
            break
        Jx = np.zeros((n_unknown, n_unknown))
        h = 1e-7
        for k in range(n_unknown):
            dx = np.zeros(n_unknown)
            dx[k] = h * max(1.0, abs(x[k]))
            Jx[:, k] = (G(x + dx) - G(x - dx)) / (2 * dx[k])
        try:
            step = np.linalg.solve(Jx, g)
        except np.linalg.LinAlgError:
            raise NonConvergenceError("extended-system Jacobian is singular")
        # damped update, keep the iterate on the physical branch
        lam = 1.0
        for _ in range(30):
            xn = x - lam * step
            if xn[-1] > 0 and np.all(xn[:-1] >= -1e-14):
                gn = G(xn)
                if float(np.max(np.abs(gn))) <= float(np.max(np.abs(g))) or lam < 1e-3:
                    x = xn
                    break
            lam *= 0.5
        else:
            raise NonConvergenceError("extended Newton line search failed")

    g = G(x)
    if float(np.max(np.abs(g))) > 1e-9:
        raise NonConvergenceError(
            f"extended Newton residual {float(np.max(np.abs(g))):.3e} too large"
        )
    F_act, R = np.clip(x[:-1], 0.0, None), float(x[-1])
    F_all = np.zeros(d)
    F_all[active] = F_act
    gamma = jacobian_gamma(BrwParams(tuple(p_full), R), F_all)
    ident = 2.0 * float(np.sum(F_all**2 / (1.0 + F_all**2))) - 1.0
    return SingularityResult(
        R=R,
        F=tuple(F_all),
        gamma=gamma,
        identity_residual=ident,
        iterations=best.iterations + it_newton,
    )


def criticality_residuals(b) -> tuple:
    """(q1, q2): distance of b from the two boundary identities.

    q1 = sum_i b_i/(1+b_i) - 1 vanishes on the extinction/weak boundary,
    q2 = sum_i b_i^2/(1+b_i^2) - 1 on the weak/strong boundary; both are
    over the full 2d-letter alphabet and strictly increase in every b_i.
    """
    barr = np.asarray(getattr(b, "b", b), dtype=float)
    q1 = float(np.sum(barr / (1.0 + barr))) - 1.0
    q2 = float(np.sum(barr**2 / (1.0 + barr**2))) - 1.0
    return q1, q2


@dataclass
class RayScanResult:
    direction: tuple
    mode: str
    t1: Optional[float]
    t1_ci: tuple
    t2: Optional[float]
    t2_ci: tuple
    diagnostics: dict = field(default_factory=dict)


def _q1_of_solution(sol: BrwSolution) -> float:
    F = np.asarray(sol.expanded)
    return float(np.sum(F / (1.0 + F))) - 1.0


@dataclass
class MCScanConfig:
    """Tunable budget for Monte Carlo boundary bisection along a ray.

    The survival and reinfection thresholds are calibrated together so
    that on the line (d = 1, where the weak phase is empty) the two
    bisections land on the same scale; with that calibration fixed, a
    genuine weak phase shows up as a gap between the two crossings.
    Event budgets abort runaway supercritical runs; aborted runs count as
    surviving (they are far too large to die) and the reinfection window
    adapts to the observed time span.
    """

    runs_per_point: int = 10_000
    horizon_survival: float = 60.0
    max_events_survival: int = 5_000
    horizon_reinfection: float = 7.0
    window_frac: float = 0.7
    max_events_reinfection: int = 6_000
    eps_survival: float = 0.36
    eps_reinfection: float = 0.33
    bracket: tuple = (0.1, 2.6)
    bisections: int = 7
    workers: object = None


def _bisect_frequency(freq_fn, threshold: float, bracket: tuple, steps: int):
    """Bisect a nondecreasing frequency curve through a threshold.

    Returns (t, (ci_lo, ci_hi), evaluations).  The confidence interval is
    conservative: the widest t-range whose endpoint frequencies are not
    yet distinguishable from the threshold at the Wilson 95% level.
    """
    lo, hi = bracket
    evals = []

    def freq(t):
        est = freq_fn(t)
        evals.append((t, est))
        return est

    f_lo = freq(lo)
    if f_lo.flags["wilson_low"] > threshold:
        raise ParameterError(f"bracket low end already above threshold ({f_lo.value:.3f})")
    f_hi = freq(hi)
    while f_hi.flags["wilson_high"] < threshold:
        hi *= 1.5
        if hi > 100 * bracket[1]:
            raise NonConvergenceError("no bracket: frequency never crosses threshold")
        f_hi = freq(hi)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        f_mid = freq(mid)
        if f_mid.value < threshold:
            lo = mid
        else:
            hi = mid
    t_star = 0.5 * (lo + hi)
    below = [t for t, e in evals if e.flags["wilson_high"] < threshold]
    above = [t for t, e in evals if e.flags["wilson_low"] > threshold]
    ci_lo = max(below) if below else bracket[0]
    ci_hi = min(above) if above else hi
    return t_star, (ci_lo, ci_hi), evals


def phase_ray_scan_montecarlo(
    direction: Sequence[float],
    seed: int,
    config: Optional[MCScanConfig] = None,
) -> RayScanResult:
    """Boundary estimates along a physical-rate ray by simulation.

    t1: the scale where the survival frequency (before a fixed horizon)
    crosses a small threshold.  t2: the scale where sustained root
    reinfection (a reinfection in the late window) crosses its threshold.
    The late-reinfection event implies survival deep into the run, so the
    second crossing never sits below the first beyond noise.  Desk-scale
    surrogates: both thresholds sit slightly inside the true phases.
    """
    from .engine import Rates
    from .estimators import late_reinfection_frequency, survival_frequency

    cfg = config or MCScanConfig()
    dir_arr = np.asarray(direction, dtype=float)
    if np.any(dir_arr < 0) or not np.any(dir_arr > 0):
        raise ParameterError("direction needs nonnegative entries, one positive")

    def survival_at(t):
        return survival_frequency(
            Rates(tuple(t * dir_arr)),
            cfg.runs_per_point,
            cfg.horizon_survival,
            seed,
            max_events=cfg.max_events_survival,
            workers=cfg.workers,
        )

    def reinfection_at(t):
        return late_reinfection_frequency(
            Rates(tuple(t * dir_arr)),
            cfg.runs_per_point,
            cfg.horizon_reinfection,
            seed + 1,
            window_frac=cfg.window_frac,
            max_events=cfg.max_events_reinfection,
            workers=cfg.workers,
        )

    t1, t1_ci, ev1 = _bisect_frequency(
        survival_at, cfg.eps_survival, cfg.bracket, cfg.bisections
    )
    t2, t2_ci, ev2 = _bisect_frequency(
        reinfection_at, cfg.eps_reinfection, cfg.bracket, cfg.bisections
    )
    return RayScanResult(
        direction=tuple(dir_arr),
        mode="montecarlo",
        t1=t1,
        t1_ci=t1_ci,
        t2=t2,
        t2_ci=t2_ci,
        diagnostics={
            "survival_curve": [(t, e.value, e.stderr) for t, e in ev1],
            "reinfection_curve": [(t, e.value, e.stderr) for t, e in ev2],
            "config": {
                "runs_per_point": cfg.runs_per_point,
                "eps_survival": cfg.eps_survival,
                "eps_reinfection": cfg.eps_reinfection,
                "horizon_survival": cfg.horizon_survival,
                "horizon_reinfection": cfg.horizon_reinfection,
            },
        },
    )


def phase_ray_scan(
    direction: Sequence[float],
    mode: str = "analytic",
    seed: int = 0,
    config: Optional[MCScanConfig] = None,
) -> RayScanResult:
    """Both phase-boundary crossings along a ray, analytic or Monte Carlo."""
    if mode == "analytic":
        return phase_ray_scan_analytic(direction)
    if mode == "montecarlo":
        return phase_ray_scan_montecarlo(direction, seed, config)
    raise ParameterError(f"unknown mode {mode!r}")


def phase_ray_scan_analytic(direction: Sequence[float]) -> RayScanResult:
    """Both boundary crossings along one ray, in the (p, z) scale.

    t2 is the singularity scale R; t1 solves q1(F(z)) = 0 below R by
    bisection (q1 increases along the branch).  For d = 1 the q1 root sits
    exactly at the singularity, so t1 = t2 and the weak phase is empty.
    """
    p = np.asarray(direction, dtype=float)
    if np.any(p < 0) or not np.any(p > 0):
        raise ParameterError("direction needs nonnegative entries, one positive")
    sing = find_singularity(tuple(p))
    R = sing.R
    q1_at_R = float(
        np.sum(np.asarray(sing.F + sing.F) / (1.0 + np.asarray(sing.F + sing.F)))
    ) - 1.0
    if q1_at_R <= 0.0:
        t1 = R  # no interior q1 root: the two boundaries coincide on this ray
    else:
        lo, hi = 0.0, R
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            sol = solve_F(BrwParams(tuple(p), mid))
            if not sol.converged:
                hi = mid
                continue
            if _q1_of_solution(sol) < 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-10 * max(R, 1.0):
                break
        t1 = 0.5 * (lo + hi)
    return RayScanResult(
        direction=tuple(p),
        mode="analytic",
        t1=min(t1, R),
        t1_ci=(min(t1, R), min(t1, R)),
        t2=R,
        t2_ci=(R, R),
        diagnostics={
            "gamma_at_R": sing.gamma,
            "identity_residual": sing.identity_residual,
            "F_at_R": sing.F,
            "q1_at_R": q1_at_R,
            "scale_note": "t values are in the (p,z) parameterization, "
            "physical rates defined up to an undetermined proportionality",
        },
    )
