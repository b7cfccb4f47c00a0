"""Finite-dimensional spectral computations for the boundary analysis.

The central object is the 2d x 2d nonnegative matrix with entries b_j^rho
for j != inv(i) and zeros on inverse transitions.  Its lead eigenvalue
solves a scalar equation, sum_i b_i^rho / (theta + b_i^rho) = 1, which is
the primary solver here; dense power iteration is kept as an independent
oracle and the two cross-validate each other.  From the eigendata come the
boundary Markov chain, its entropy, Hausdorff-dimension formulas for the
limit set and its intersections with generic boundary sets, and the
backscatter and Gibbs-variational checks.

Entropy uses the natural logarithm throughout; the dimension formulas are
ratios of logarithms, so the base cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cayley import ParameterError, Word


class NonConvergenceError(RuntimeError):
    """Iterative solver failed to reach its tolerance."""


class OutOfDomainError(ValueError):
    """Input lies outside the region where the quantity is defined."""


def _as_b(b) -> np.ndarray:
    """Accept a BVector-like object (with .b) or a plain sequence of 2d reals."""
    arr = np.asarray(getattr(b, "b", b), dtype=float)
    if arr.ndim != 1 or len(arr) % 2 != 0 or len(arr) < 2:
        raise ParameterError("b must be a flat vector of 2d entries")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ParameterError("b entries must be finite and >= 0")
    return arr


def _check_symmetric(barr: np.ndarray) -> None:
    d = len(barr) // 2
    if not np.allclose(barr[:d], barr[d:], rtol=1e-9, atol=1e-12):
        raise ParameterError("b must satisfy b_i = b_inv(i)")


def pf_matrix(b, rho: float) -> np.ndarray:
    """The matrix with entries b_j^rho off the inverse transition, 0 on it."""
    barr = _as_b(b)
    n = len(barr)
    d = n // 2
    M = np.tile(barr**rho, (n, 1))
    for i in range(n):
        M[i, (i + d) % n] = 0.0
    return M


def solve_lead_eigenvalue(b, rho: float, tol: float = 1e-13) -> float:
    """Lead eigenvalue via the scalar equation sum c_i/(theta+c_i) = 1.

    The residual is strictly decreasing in theta, so a bisection-guarded
    Newton iteration from a bracketing interval converges to machine
    precision.  All-zero input is the degenerate case theta = 0.
    """
    if rho <= 0:
        raise ParameterError(f"rho must be > 0, got {rho}")
    c = _as_b(b) ** rho
    c = c[c > 0]
    if len(c) == 0:
        return 0.0

    def g(th: float) -> float:
        return float(np.sum(c / (th + c)) - 1.0)

    lo, hi = 0.0, float(np.sum(c))
    if len(c) == 1:
        return hi  # single positive entry: theta = c
    th = 0.5 * hi
    for _ in range(200):
        r = g(th)
        if abs(r) < tol:
            break
        if r > 0:
            lo = th
        else:
            hi = th
        dg = float(-np.sum(c / (th + c) ** 2))
        step = th - r / dg
        th = step if lo < step < hi else 0.5 * (lo + hi)
    return th


def power_iteration(
    M: np.ndarray, tol: float = 1e-12, max_iter: int = 200_000
) -> tuple:
    """Perron-Frobenius eigentriple (theta, v, w) of a nonnegative matrix.

    Iterates (M + I) to sidestep periodicity; v and w are the right and
    left eigenvectors, normalized to sum 1.  Raises NonConvergenceError
    with a spectral-gap diagnostic if the residual stalls above tol.
    """
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError("matrix must be square")
    if np.any(A < 0):
        raise ParameterError("matrix must be nonnegative")
    n = A.shape[0]
    shifted = A + np.eye(n)

    def one_side(B: np.ndarray) -> tuple:
        v = np.full(n, 1.0 / n)
        res = prev_res = math.inf
        for _ in range(max_iter):
            u = B @ v
            s = u.sum()
            if s <= 0:
                raise NonConvergenceError("iterate collapsed; matrix reducible?")
            u /= s
            Bu = B @ u
            lam = float(u @ Bu / (u @ u))
            prev_res, res = res, float(np.max(np.abs(Bu - lam * u)))
            v = u
            if res < tol * max(1.0, abs(lam)):
                return lam, v
        gap = res / prev_res if 0 < prev_res < math.inf else float("nan")
        raise NonConvergenceError(
            f"power iteration stalled at residual {res:.3e} "
            f"(contraction ratio ~{gap:.6f}; spectral gap too small)"
        )

    lam_r, v = one_side(shifted)
    lam_l, w = one_side(shifted.T)
    theta = 0.5 * (lam_r + lam_l) - 1.0
    return theta, v, w


@dataclass
class BoundaryChain:
    """Stationary one-step Markov chain on letters from the eigendata."""

    d: int
    rho: float
    b: tuple
    theta: float
    P: np.ndarray
    pi: np.ndarray
    entropy: float
    v: np.ndarray


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary law of an irreducible stochastic matrix (linear solve)."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    A = np.eye(n) - P.T + np.ones((n, n))
    pi = np.linalg.solve(A, np.ones(n))
    if np.any(pi < -1e-10):
        raise ParameterError("chain appears reducible: negative stationary mass")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def entropy_rate(P: np.ndarray, pi: np.ndarray) -> float:
    """h = -sum_i pi_i sum_j p(i,j) log p(i,j), natural log."""
    h = 0.0
    for i in range(P.shape[0]):
        row = P[i]
        nz = row > 0
        h -= pi[i] * float(np.sum(row[nz] * np.log(row[nz])))
    return h


def boundary_chain(b, rho: float) -> BoundaryChain:
    """Markov chain p(i,j) = b_j^rho v_j / (theta v_i) on allowed transitions.

    The right eigenvector has the closed form v_i = 1/(theta + b_i^rho)
    once b is symmetric over inverse pairs, and the stationary law is
    pi_i proportional to b_i^rho v_i^2.  Both are verified to tight
    tolerances before the chain is returned.
    """
    barr = _as_b(b)
    _check_symmetric(barr)
    if np.any(barr <= 0):
        raise ParameterError("boundary chain needs all b_i > 0 (irreducible)")
    n = len(barr)
    d = n // 2
    theta = solve_lead_eigenvalue(barr, rho)
    c = barr**rho
    v = 1.0 / (theta + c)
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if j != (i + d) % n:
                P[i, j] = c[j] * v[j] / (theta * v[i])
    row_err = float(np.max(np.abs(P.sum(axis=1) - 1.0)))
    if row_err > 1e-12:
        raise NonConvergenceError(f"chain rows sum to 1 only within {row_err:.3e}")
    pi = c * v**2
    pi = pi / pi.sum()
    stat_err = float(np.max(np.abs(pi @ P - pi)))
    if stat_err > 1e-10:
        raise NonConvergenceError(f"stationary residual {stat_err:.3e} too large")
    h = entropy_rate(P, pi)
    return BoundaryChain(d=d, rho=rho, b=tuple(barr), theta=theta, P=P, pi=pi, entropy=h, v=v)


def hausdorff_dim(theta1: float, alpha: float) -> float:
    """Limit-set dimension -log(theta1)/log(alpha)."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    if theta1 <= 0:
        raise ParameterError(f"theta1 must be > 0, got {theta1}")
    return -math.log(theta1) / math.log(alpha)


def boundary_dimension(d: int, alpha: float) -> float:
    """Dimension of the full geometric boundary: -log(2d-1)/log(alpha)."""
    if d < 1:
        raise ParameterError("d must be >= 1")
    return hausdorff_dim(2 * d - 1, alpha)


@dataclass
class IntersectionDimension:
    value: float
    empty: bool  # entropy deficit: the intersection is a.s. empty
    h: float
    phi_mean: float  # sum_i pi_i log b_i, -inf when mass sits on b_i = 0


def dim_intersection(chain: BoundaryChain, b, alpha: float) -> IntersectionDimension:
    """Dimension of the limit set within the mu-generic boundary set."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    barr = _as_b(b)
    pi = chain.pi
    if np.any((barr <= 0) & (pi > 0)):
        return IntersectionDimension(-math.inf, True, chain.entropy, -math.inf)
    phi_mean = float(np.sum(pi * np.log(barr)))
    h = chain.entropy
    num = h + phi_mean
    if num < 0:
        return IntersectionDimension(0.0, True, h, phi_mean)
    return IntersectionDimension(-num / math.log(alpha), False, h, phi_mean)


def check_backscatter(b) -> float:
    """Margin (2d-1) theta_2 - theta_1^2; nonnegative, zero iff isotropic."""
    barr = _as_b(b)
    d = len(barr) // 2
    t1 = solve_lead_eigenvalue(barr, 1.0)
    t2 = solve_lead_eigenvalue(barr, 2.0)
    return (2 * d - 1) * t2 - t1 * t1


def pressure_markov(b, rho: float) -> float:
    """Pressure of rho times the letter potential: log theta_rho."""
    theta = solve_lead_eigenvalue(b, rho)
    if theta == 0.0:
        return -math.inf
    return math.log(theta)


def validate_chain_pattern(P: np.ndarray, d: int, tol: float = 1e-9) -> None:
    P = np.asarray(P, dtype=float)
    n = 2 * d
    if P.shape != (n, n):
        raise ParameterError(f"chain must be {n}x{n}")
    if np.any(P < -tol):
        raise ParameterError("chain has negative entries")
    if np.max(np.abs(P.sum(axis=1) - 1.0)) > tol:
        raise ParameterError("chain rows must sum to 1")
    for i in range(n):
        if abs(P[i, (i + d) % n]) > tol:
            raise ParameterError("chain puts mass on a forbidden inverse transition")


def gibbs_variational_check(b, rho: float, trial_chains: Sequence[np.ndarray]) -> list:
    """Slack P(rho*phi) - h(mu) - rho * sum pi_i log b_i for each trial chain.

    Nonnegative for every chain respecting the forbidden-inverse pattern,
    and zero exactly at the chain built from the eigendata.
    """
    barr = _as_b(b)
    if np.any(barr <= 0):
        raise ParameterError("gibbs check needs all b_i > 0")
    d = len(barr) // 2
    pressure = pressure_markov(barr, rho)
    slacks = []
    for P in trial_chains:
        validate_chain_pattern(P, d)
        pi = stationary_distribution(np.asarray(P, dtype=float))
        h = entropy_rate(np.asarray(P, dtype=float), pi)
        phi_mean = float(np.sum(pi * np.log(barr)))
        slacks.append(pressure - h - rho * phi_mean)
    return slacks


def perturb_chain(P: np.ndarray, scale: float, seed) -> np.ndarray:
    """Random stochastic perturbation preserving the zero pattern."""
    rng = np.random.default_rng(seed)
    P = np.asarray(P, dtype=float).copy()
    mask = P > 0
    noise = 1.0 + scale * rng.uniform(-1.0, 1.0, size=P.shape)
    P[mask] *= noise[mask]
    P /= P.sum(axis=1, keepdims=True)
    return P


def solve_r_u(b, tol: float = 1e-12) -> float:
    """The exponent rho solving sum b_i^rho/(1+b_i^rho) = 1 (all b_i in (0,1)).

    The residual is strictly decreasing in rho, positive for small rho when
    d > 1 and negative for large rho, so bisection applies.
    """
    barr = _as_b(b)
    if np.any(barr >= 1.0):
        raise OutOfDomainError("some b_i >= 1: strong-survival side, no root")
    if np.any(barr <= 0.0):
        raise OutOfDomainError("needs all b_i in (0,1)")

    def g(rho: float) -> float:
        c = barr**rho
        return float(np.sum(c / (1.0 + c)) - 1.0)

    lo = 1e-12
    if g(lo) <= 0:
        raise OutOfDomainError("residual nonpositive at rho -> 0; no positive root")
    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            raise NonConvergenceError("no sign change found for r_u")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def sample_boundary_word(chain: BoundaryChain, length: int, seed) -> Word:
    """Draw a reduced word: first letter from pi, then chain transitions."""
    if length < 1:
        raise ParameterError("length must be >= 1")
    rng = np.random.default_rng(seed)
    n = 2 * chain.d
    cum_pi = np.cumsum(chain.pi)
    cum_P = np.cumsum(chain.P, axis=1)
    out = [int(np.searchsorted(cum_pi, rng.random(), side="right"))]
    for _ in range(length - 1):
        row = cum_P[out[-1]]
        out.append(int(np.searchsorted(row, rng.random(), side="right")))
    return tuple(min(i, n - 1) for i in out)


@dataclass
class DimensionReport:
    """Computable dimension summary for one parameter point."""

    alpha: float
    d: int
    b: tuple
    theta1: float
    theta2: float
    delta: Optional[float]  # limit-set dimension, None in strong survival
    delta_boundary: float  # dimension of the whole boundary
    delta_mu: Optional[float]  # dimension of the intersection with the chain's set
    h_mu: Optional[float]
    phi_mean: Optional[float]
    backscatter_margin: float
    r_u: Optional[float]
    isotropic: bool
    criticality_margin: float  # theta2 - 1
    at_criticality: bool
    strong_survival: bool
    flags: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = repr(v)
            elif isinstance(v, tuple):
                out[k] = list(v)
            else:
                out[k] = v
        return out


def dimension_report(b, alpha: float, criticality_tol: float = 1e-3) -> DimensionReport:
    """Assemble the dimension observables from a calibrated b vector."""
    barr = _as_b(b)
    _check_symmetric(barr)
    d = len(barr) // 2
    theta1 = solve_lead_eigenvalue(barr, 1.0)
    theta2 = solve_lead_eigenvalue(barr, 2.0)
    margin = check_backscatter(barr)
    iso = bool(np.ptp(barr) <= 1e-9 * max(1.0, float(np.max(barr))))
    strong = theta2 > 1.0 + criticality_tol
    flags = {}
    delta = delta_mu = h_mu = phi_mean = None
    if not strong and theta1 > 0:
        delta = hausdorff_dim(theta1, alpha)
        if np.all(barr > 0):
            chain = boundary_chain(barr, 2.0)
            inter = dim_intersection(chain, barr, alpha)
            delta_mu = inter.value
            h_mu = inter.h
            phi_mean = inter.phi_mean
            flags["intersection_empty"] = inter.empty
    r_u_val = None
    if np.all(barr > 0) and np.all(barr < 1) and d > 1:
        try:
            r_u_val = solve_r_u(barr)
        except (OutOfDomainError, NonConvergenceError) as e:
            flags["r_u"] = str(e)
    else:
        flags["r_u"] = "out of domain"
    return DimensionReport(
        alpha=alpha,
        d=d,
        b=tuple(barr),
        theta1=theta1,
        theta2=theta2,
        delta=delta,
        delta_boundary=boundary_dimension(d, alpha),
        delta_mu=delta_mu,
        h_mu=h_mu,
        phi_mean=phi_mean,
        backscatter_margin=margin,
        r_u=r_u_val,
        isotropic=iso,
        criticality_margin=theta2 - 1.0,
        at_criticality=abs(theta2 - 1.0) < criticality_tol,
        strong_survival=strong,
        flags=flags,
    )
