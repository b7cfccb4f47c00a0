"""Monte Carlo estimators for the infection-probability observables.

Every estimator fans replicates out through `parallel.map_replicates`, so
results are deterministic given (inputs, seed) and independent of worker
count; aggregation uses math.fsum in replicate order.  Ever-infected
events are measured up to a finite horizon; estimators report a
second-look value at a shorter horizon so the truncation sensitivity is
visible in the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import parallel
from .cayley import ParameterError, Word
from .engine import Rates, replicate_seed, run, run_restricted

_Z95 = 1.959963984540054


def wilson_interval(k: int, n: int, z: float = _Z95) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ParameterError("need n >= 1")
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _proportion_estimate(k: int, n: int, method: str, **flags) -> "Estimate":
    lo, hi = wilson_interval(k, n)
    return Estimate(
        value=k / n,
        stderr=(hi - lo) / (2 * _Z95),
        n_samples=n,
        method=method,
        flags={"wilson_low": lo, "wilson_high": hi, **flags},
    )


@dataclass
class Estimate:
    value: float
    stderr: float
    n_samples: int
    method: str
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ParameterError("n_samples must be >= 1")
        if math.isfinite(self.stderr) and self.stderr < 0:
            raise ParameterError("stderr must be >= 0")


@dataclass
class HMatrixEstimate:
    """Level-sum matrix: entry (i,j) sums u_x^rho over words of length n
    starting with letter i and ending with letter j."""

    d: int
    n: int
    rho: float
    entries: np.ndarray
    stderr: np.ndarray
    n_samples: int
    seed: int
    horizon: float

    @property
    def total(self) -> float:
        return float(self.entries.sum())


@dataclass
class BVector:
    """Calibrated per-letter weights (symmetric over inverse pairs)."""

    b: tuple  # 2d entries
    rho: float
    residual: float
    depth: int  # calibration used levels depth and depth+1
    flags: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return len(self.b) // 2


# ---------------------------------------------------------------------------
# replicate workers (module level so process pools can pickle them)


def _worker_hit_time(master, k, word, rates, horizon, truncate_depth, max_events):
    rec = run(
        rates,
        horizon,
        replicate_seed(master, k),
        truncate_depth=truncate_depth,
        max_events=max_events,
    )
    return rec.first_hit.get(word)


def _worker_tracked(master, k, rates, horizon, times, words, truncate_depth, max_events):
    rec = run(
        rates,
        horizon,
        replicate_seed(master, k),
        snapshot_times=times,
        track_words=words,
        truncate_depth=truncate_depth,
        max_events=max_events,
    )
    got = {s.t: s.tracked for s in rec.snapshots}
    return tuple(
        tuple(bool(got[t][w]) if t in got and got[t] else False for w in words)
        for t in times
    )


def _worker_power_hits(master, k, letter, rates, n_max, horizon, truncate_depth, max_events):
    rec = run(
        rates,
        horizon,
        replicate_seed(master, k),
        truncate_depth=truncate_depth,
        max_events=max_events,
    )
    return tuple(1 if ((letter,) * n) in rec.first_hit else 0 for n in range(1, n_max + 1))


def _worker_level_hits(master, k, rates, n, horizon, truncate_depth, max_events):
    rec = run(
        rates,
        horizon,
        replicate_seed(master, k),
        truncate_depth=truncate_depth,
        max_events=max_events,
    )
    return tuple(w for w in rec.first_hit if len(w) == n)


def _worker_level_counts_at(master, k, rates, n, times, truncate_depth, max_events):
    rec = run(
        rates,
        max(times),
        replicate_seed(master, k),
        snapshot_times=times,
        truncate_depth=truncate_depth,
        max_events=max_events,
    )
    got = {s.t: s.level_counts.get(n, 0) for s in rec.snapshots}
    return tuple(got.get(t, 0) for t in times)


def _worker_restricted_hits(master, k, rates, level, horizon, base, max_events):
    rec = run_restricted(
        rates,
        level,
        horizon,
        replicate_seed(master, k),
        base_letter=base,
        max_events=max_events,
    )
    hits = tuple(w for w in rec.first_hit if len(w) == level)
    return hits, rec.active_at_end or rec.status != "ok"


# ---------------------------------------------------------------------------


def estimate_u(
    x: Word,
    rates: Rates,
    runs: int,
    horizon: float,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """P{x ever infected}, as the before-horizon surrogate.

    The root is in the initial state, so its value is exactly 1.  The
    flags carry the same proportion at 3/4 of the horizon; disagreement
    beyond two standard errors marks a horizon-sensitive estimate.
    """
    if runs < 1:
        raise ParameterError("runs must be >= 1")
    if x == ():
        return Estimate(1.0, 0.0, runs, "exact", {"note": "root is initially infected"})
    hit_times = parallel.map_replicates(
        _worker_hit_time,
        runs,
        seed,
        args=(x, rates, horizon, truncate_depth, max_events),
        workers=workers,
    )
    k = sum(1 for t in hit_times if t is not None)
    alt_h = 0.75 * horizon
    k_alt = sum(1 for t in hit_times if t is not None and t <= alt_h)
    est = _proportion_estimate(k, runs, "mc_ever_infected")
    est.flags["horizon"] = horizon
    est.flags["value_alt_horizon"] = k_alt / runs
    est.flags["alt_horizon"] = alt_h
    est.flags["horizon_sensitive"] = (k - k_alt) / runs > 2 * max(est.stderr, 1e-12)
    return est


def estimate_u_t(
    x: Word,
    t: float,
    rates: Rates,
    runs: int,
    horizon: float,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """P{x infected at time t}."""
    if t > horizon:
        raise ParameterError(f"t={t} exceeds horizon={horizon}")
    if t == 0.0:
        return Estimate(
            1.0 if x == () else 0.0, 0.0, runs, "exact", {"note": "initial state"}
        )
    res = parallel.map_replicates(
        _worker_tracked,
        runs,
        seed,
        args=(rates, horizon, (float(t),), (x,), truncate_depth, max_events),
        workers=workers,
    )
    k = sum(1 for r in res if r[0][0])
    return _proportion_estimate(k, runs, "mc_infected_at_t", t=t)


def estimate_beta(
    i: int,
    rates: Rates,
    n_max: int,
    runs: int,
    seed: int,
    horizon: Optional[float] = None,
    n_min: int = 1,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """Per-letter decay rate of u along the geodesic i, i^2, ..., i^n.

    Fits log u(i^n) against n by least squares and exponentiates the
    slope (a ratio estimator would be dominated by small-count noise at
    the deep levels).  Censored when fewer than two levels have hits.
    """
    if not 0 <= i < 2 * rates.d:
        raise ParameterError("letter out of range")
    if n_max < n_min or n_min < 1:
        raise ParameterError("need 1 <= n_min <= n_max")
    if horizon is None:
        horizon = 4.0 * max(n_max, 4)
    hits = parallel.map_replicates(
        _worker_power_hits,
        runs,
        seed,
        args=(i, rates, n_max, horizon, truncate_depth, max_events),
        workers=workers,
    )
    counts = [sum(h[n - 1] for h in hits) for n in range(1, n_max + 1)]
    per_n = []
    for n in range(n_min, n_max + 1):
        kk = counts[n - 1]
        lo, hi = wilson_interval(kk, runs)
        per_n.append({"n": n, "u_hat": kk / runs, "se": (hi - lo) / (2 * _Z95)})
    pts = [(n, counts[n - 1] / runs) for n in range(n_min, n_max + 1) if counts[n - 1] > 0]
    if len(pts) < 2:
        return Estimate(
            0.0,
            0.0,
            runs,
            "mc_loglinear_fit",
            {"censored": True, "per_n": per_n, "n_points": len(pts)},
        )
    xs = np.array([p[0] for p in pts], dtype=float)
    ys = np.log([p[1] for p in pts])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    dof = max(len(pts) - 2, 1)
    slope_se = math.sqrt(
        float(resid @ resid) / dof / float(np.sum((xs - xs.mean()) ** 2))
    )
    beta = math.exp(slope)
    return Estimate(
        beta,
        beta * slope_se,
        runs,
        "mc_loglinear_fit",
        {"censored": len(pts) < (n_max - n_min + 1), "per_n": per_n},
    )


def estimate_eta(
    rates: Rates,
    t_grid: Sequence[float],
    runs: int,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """Decay rate of P{root infected at t}: exponential fit over the grid.

    Returns eta <= 1 (clamped with a flag if the raw fit exceeds 1); the
    fit is flagged degenerate when the survival curve never moves or the
    grid leaves fewer than two positive points.
    """
    times = tuple(sorted(float(t) for t in t_grid))
    if len(times) < 2 or times[0] <= 0:
        raise ParameterError("t_grid must hold at least two positive times")
    res = parallel.map_replicates(
        _worker_tracked,
        runs,
        seed,
        args=(rates, times[-1], times, ((),), truncate_depth, max_events),
        workers=workers,
    )
    probs = []
    for ti in range(len(times)):
        k = sum(1 for r in res if r[ti][0])
        probs.append(k / runs)
    pts = [(t, p) for t, p in zip(times, probs) if p > 0]
    flags = {"p_hat": dict(zip(times, probs))}
    if len(pts) < 2:
        flags["degenerate"] = "survival vanished on the grid"
        return Estimate(0.0, 0.0, runs, "mc_exp_fit", flags)
    if min(p for _, p in pts) > 1.0 - 1.0 / runs:
        flags["degenerate"] = "survival ~ 1 over the whole grid"
        return Estimate(1.0, 0.0, runs, "mc_exp_fit", flags)
    xs = np.array([t for t, _ in pts])
    ys = np.log([p for _, p in pts])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    dof = max(len(pts) - 2, 1)
    slope_se = math.sqrt(
        float(resid @ resid) / dof / float(np.sum((xs - xs.mean()) ** 2))
    )
    eta = math.exp(slope)
    if eta > 1.0:
        flags["clamped"] = eta
        eta = 1.0
    return Estimate(eta, eta * slope_se, runs, "mc_exp_fit", flags)


def _aggregate_counts(per_run_hits: list) -> dict:
    counts: dict = {}
    for hits in per_run_hits:
        for w in hits:
            counts[w] = counts.get(w, 0) + 1
    return counts


def _bootstrap_stats(per_run_hits, stat_fn, B: int, seed: int):
    """Stderr of stat_fn(counts, R) under multinomial resampling of runs."""
    R = len(per_run_hits)
    rng = np.random.default_rng(replicate_seed(seed, 0x0B00))
    vals = []
    for _ in range(B):
        mult = rng.multinomial(R, np.full(R, 1.0 / R))
        counts: dict = {}
        for r, m in enumerate(mult):
            if m:
                for w in per_run_hits[r]:
                    counts[w] = counts.get(w, 0) + m
        vals.append(stat_fn(counts, R))
    arr = np.asarray(vals, dtype=float)
    return float(np.std(arr, axis=0, ddof=1)) if arr.ndim == 1 else np.std(
        arr, axis=0, ddof=1
    )


def level_hit_samples(
    rates: Rates,
    n: int,
    runs: int,
    horizon: float,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
) -> list:
    """Per-run lists of level-n vertices ever infected (shared machinery)."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    return parallel.map_replicates(
        _worker_level_hits,
        runs,
        seed,
        args=(rates, n, horizon, truncate_depth, max_events),
        workers=workers,
    )


def estimate_theta(
    rho: float,
    rates: Rates,
    n: int,
    runs: int,
    horizon: float,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
    bootstrap: int = 200,
    samples: Optional[list] = None,
) -> Estimate:
    """Level-sum growth rate (sum over G_n of u_hat^rho)^(1/n).

    Unvisited vertices contribute zero.  Pass precomputed `samples` from
    level_hit_samples to share runs between rho values.
    """
    if n < 2:
        raise ParameterError("n must be >= 2")
    if samples is None:
        samples = level_hit_samples(
            rates, n, runs, horizon, seed, truncate_depth, max_events, workers
        )
    R = len(samples)
    counts = _aggregate_counts(samples)

    def stat(cnts: dict, rr: int) -> float:
        s = math.fsum((c / rr) ** rho for c in cnts.values())
        return s ** (1.0 / n) if s > 0 else 0.0

    value = stat(counts, R)
    if not counts:
        return Estimate(
            0.0, 0.0, R, "mc_level_sum", {"censored": True, "level_sum": 0.0}
        )
    se = _bootstrap_stats(samples, stat, bootstrap, seed)
    return Estimate(
        value,
        float(se),
        R,
        "mc_level_sum",
        {"level_sum": math.fsum((c / R) ** rho for c in counts.values()), "rho": rho},
    )


def estimate_H(
    rho: float,
    n: int,
    rates: Rates,
    runs: int,
    horizon: float,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
    bootstrap: int = 120,
    samples: Optional[list] = None,
) -> HMatrixEstimate:
    """Level-sum matrix split by first and last letter of each word."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    if samples is None:
        samples = level_hit_samples(
            rates, n, runs, horizon, seed, truncate_depth, max_events, workers
        )
    R = len(samples)
    m = 2 * rates.d
    counts = _aggregate_counts(samples)

    def mat(cnts: dict, rr: int) -> np.ndarray:
        M = np.zeros((m, m))
        for w, c in cnts.items():
            M[w[0], w[-1]] += (c / rr) ** rho
        return M

    entries = mat(counts, R)
    rng = np.random.default_rng(replicate_seed(seed, 0x0B01))
    boots = np.zeros((bootstrap, m, m))
    for bi in range(bootstrap):
        mult = rng.multinomial(R, np.full(R, 1.0 / R))
        cnts: dict = {}
        for r, mu in enumerate(mult):
            if mu:
                for w in samples[r]:
                    cnts[w] = cnts.get(w, 0) + mu
        boots[bi] = mat(cnts, R)
    stderr = np.std(boots, axis=0, ddof=1)
    return HMatrixEstimate(
        d=rates.d,
        n=n,
        rho=rho,
        entries=entries,
        stderr=stderr,
        n_samples=R,
        seed=seed,
        horizon=horizon,
    )


def calibrate_b(H_n: HMatrixEstimate, H_n1: HMatrixEstimate) -> BVector:
    """Fit the one-step transfer weights between consecutive level matrices.

    Model: column j of the level-(n+1) matrix is b_j^rho times the row
    sums of the level-n matrix excluding column inv(j).  One scalar least
    squares per column, then symmetrization over inverse pairs.  The
    relative residual is the quality signal; a tiny design norm flags an
    ill-conditioned column (ask for more runs or smaller depth).
    """
    if H_n.rho != H_n1.rho:
        raise ParameterError("H matrices must share rho")
    if H_n1.n != H_n.n + 1:
        raise ParameterError("need consecutive depths n and n+1")
    if H_n.d != H_n1.d:
        raise ParameterError("H matrices must share d")
    d = H_n.d
    m = 2 * d
    rho = H_n.rho
    A = H_n.entries
    C = H_n1.entries
    b_pow = np.zeros(m)
    ill = []
    scale = float(np.max(A)) if np.max(A) > 0 else 1.0
    for j in range(m):
        s = A.sum(axis=1) - A[:, (j + d) % m]
        denom = float(s @ s)
        if denom <= (1e-12 * scale) ** 2:
            ill.append(j)
            b_pow[j] = 0.0
        else:
            b_pow[j] = max(float(s @ C[:, j]) / denom, 0.0)
    b = b_pow ** (1.0 / rho)
    b = 0.5 * (b + np.roll(b, -d))  # symmetrize over inverse pairs
    pred = np.zeros_like(C)
    for j in range(m):
        s = A.sum(axis=1) - A[:, (j + d) % m]
        pred[:, j] = s * b[j] ** rho
    denom = float(np.linalg.norm(C))
    residual = float(np.linalg.norm(C - pred)) / denom if denom > 0 else 0.0
    flags = {}
    if ill:
        flags["ill_conditioned_columns"] = ill
        flags["hint"] = "increase runs or reduce depth"
    return BVector(
        b=tuple(float(v) for v in b),
        rho=rho,
        residual=residual,
        depth=H_n.n,
        flags=flags,
    )


@dataclass
class GrowthProfile:
    s_grid: tuple
    values: list  # Estimate per s (value may be -inf, flagged)
    s1: Optional[float]
    s2: Optional[float]
    flags: dict = field(default_factory=dict)


def estimate_growth_profile(
    rates: Rates,
    s_grid: Sequence[float],
    n: int,
    runs: int,
    seed: int,
    truncate_depth: Optional[int] = None,
    max_events: Optional[int] = None,
    workers=None,
) -> GrowthProfile:
    """Space-time growth rate (1/n) log E N_n(ns) on a grid of speeds s.

    N_n(ns) is the number of level-n vertices infected at time ns.  The
    zero crossings (linear interpolation) bound the inner and outer
    frontier speeds: the outer frontier moves at 1/s1, the inner at 1/s2.
    """
    ss = tuple(sorted(float(s) for s in s_grid))
    if len(ss) < 2 or ss[0] <= 0:
        raise ParameterError("s_grid must hold at least two positive speeds")
    if n < 1:
        raise ParameterError("n must be >= 1")
    times = tuple(n * s for s in ss)
    res = parallel.map_replicates(
        _worker_level_counts_at,
        runs,
        seed,
        args=(rates, n, times, truncate_depth, max_events),
        workers=workers,
    )
    values = []
    phis = []
    for si in range(len(ss)):
        mean = math.fsum(r[si] for r in res) / runs
        sd = (
            math.fsum((r[si] - mean) ** 2 for r in res) / max(runs - 1, 1)
        ) ** 0.5
        if mean <= 0:
            values.append(
                Estimate(-math.inf, math.inf, runs, "mc_profile", {"empty": True})
            )
            phis.append(-math.inf)
        else:
            phi = math.log(mean) / n
            se = sd / (mean * n * math.sqrt(runs))
            values.append(Estimate(phi, se, runs, "mc_profile", {"mean_N": mean}))
            phis.append(phi)

    crossings = []
    for a in range(len(ss) - 1):
        pa, pb = phis[a], phis[a + 1]
        if math.isfinite(pa) and math.isfinite(pb) and (pa > 0) != (pb > 0):
            t = pa / (pa - pb)
            crossings.append(ss[a] + t * (ss[a + 1] - ss[a]))
    flags = {}
    if not crossings:
        if all(not math.isfinite(p) for p in phis):
            flags["no_signal"] = "profile is -inf on the whole grid"
        elif all(p > 0 for p in phis if math.isfinite(p)):
            flags["open_interval"] = "profile positive across the grid"
        else:
            flags["open_interval"] = "no sign change on the grid"
        return GrowthProfile(ss, values, None, None, flags)
    return GrowthProfile(ss, values, min(crossings), max(crossings), flags)


# ---------------------------------------------------------------------------
# frequency observables used by the Monte Carlo phase scan


def _worker_survival(master, k, rates, horizon, max_events):
    rec = run(rates, horizon, replicate_seed(master, k), max_events=max_events)
    return rec.extinction_time is None


def survival_frequency(
    rates: Rates,
    runs: int,
    horizon: float,
    seed: int,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """Fraction of runs not extinct before the horizon.

    A run aborted on its event budget has grown too large to die; it
    counts as surviving (the residual extinction probability from a large
    set is geometrically small).
    """
    res = parallel.map_replicates(
        _worker_survival, runs, seed, args=(rates, horizon, max_events), workers=workers
    )
    return _proportion_estimate(sum(res), runs, "mc_survival")


def _worker_late_reinfection(master, k, rates, horizon, window_frac, max_events):
    rec = run(rates, horizon, replicate_seed(master, k), max_events=max_events)
    lo = window_frac * rec.end_time
    return any(t >= lo for t in rec.root_reinfections)


def late_reinfection_frequency(
    rates: Rates,
    runs: int,
    horizon: float,
    seed: int,
    window_frac: float = 0.7,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """Fraction of runs whose root is reinfected late in the observed window.

    "Late" means in the last (1 - window_frac) of the run's observed time
    span: the horizon for completed runs, the abort time for runs cut by
    the event budget.  The window adapts so that budget-aborted
    supercritical runs (which are observed only briefly) still report
    their dense early reinfections; in the weak phase the root is vacated
    and the late window stays empty.  Sustained reinfection in this sense
    separates the strong-survival side at desk scale.
    """
    if not 0.0 < window_frac < 1.0:
        raise ParameterError("window_frac must be in (0,1)")
    res = parallel.map_replicates(
        _worker_late_reinfection,
        runs,
        seed,
        args=(rates, horizon, window_frac, max_events),
        workers=workers,
    )
    return _proportion_estimate(sum(res), runs, "mc_late_reinfection")


def restricted_hit_samples(
    rates: Rates,
    level: int,
    runs: int,
    horizon: float,
    seed: int,
    base_letter: int = 0,
    max_events: Optional[int] = None,
    workers=None,
) -> tuple:
    """Per-run confined-trail hit lists at `level`, plus censor flags."""
    res = parallel.map_replicates(
        _worker_restricted_hits,
        runs,
        seed,
        args=(rates, level, horizon, base_letter, max_events),
        workers=workers,
    )
    hits = [r[0] for r in res]
    censored = [r[1] for r in res]
    return hits, censored


def estimate_w(
    x: Word,
    rates: Rates,
    runs: int,
    horizon: float,
    seed: int,
    base_letter: int = 0,
    max_events: Optional[int] = None,
    workers=None,
) -> Estimate:
    """P{a confined downward trail from the root reaches x}."""
    if len(x) < 1:
        raise ParameterError("x must be a vertex at level >= 1")
    hits, censored = restricted_hit_samples(
        rates, len(x), runs, horizon, seed, base_letter, max_events, workers
    )
    k = sum(1 for h in hits if x in h)
    est = _proportion_estimate(k, runs, "mc_confined_trail")
    est.flags["censored_runs"] = sum(censored)
    return est
