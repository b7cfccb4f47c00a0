"""Labelled Galton-Watson processes and limit-set dimensions.

A labelled process is a multitype branching process in which every
individual draws one random subset of the finite label set as offspring,
so each parent has at most one child per label.  Trees embedded in the
contact process arise from confined downward infection trails: the
offspring of a tree vertex are the level-(r below) vertices ending in the
base letter that its trails reach first.  Limit-set dimensions come from
the mean offspring number (supercritical case) or, refined by a measure
on label sequences, from an entropy-plus-potential formula; a box-counting
slope over generations of a simulated tree is the numerical oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import parallel
from .cayley import ParameterError, Word
from .engine import Rates, replicate_seed, run_restricted
from .estimators import Estimate
from .spectral import stationary_distribution


@dataclass
class OffspringLaw:
    """Distribution of one offspring set over a finite label set.

    Either an explicit table {frozenset of label indices: probability}
    (small label sets) or a sampler rng -> iterable of label indices.
    Marginals q_i are inclusion probabilities; the mean offspring number
    is their sum.
    """

    labels: tuple
    q: tuple
    sampler: Callable
    table: Optional[dict] = None

    @property
    def mean(self) -> float:
        return float(math.fsum(self.q))

    @staticmethod
    def from_table(labels: Sequence, table: dict) -> "OffspringLaw":
        labels = tuple(labels)
        total = math.fsum(table.values())
        if abs(total - 1.0) > 1e-9:
            raise ParameterError(f"offspring table sums to {total}, not 1")
        if any(p < 0 for p in table.values()):
            raise ParameterError("offspring probabilities must be >= 0")
        for s in table:
            for i in s:
                if not 0 <= i < len(labels):
                    raise ParameterError(f"label index {i} out of range")
        q = [0.0] * len(labels)
        for s, p in table.items():
            for i in s:
                q[i] += p
        sets = sorted(table, key=sorted)
        probs = np.array([table[s] for s in sets])
        cum = np.cumsum(probs)

        def sampler(rng):
            u = rng.random()
            return sets[int(np.searchsorted(cum, u, side="right").clip(0, len(sets) - 1))]

        return OffspringLaw(labels, tuple(q), sampler, dict(table))

    @staticmethod
    def bernoulli(labels: Sequence, q: Sequence[float]) -> "OffspringLaw":
        """Independent inclusion of each label with probability q_i."""
        labels = tuple(labels)
        q = tuple(float(v) for v in q)
        if len(q) != len(labels):
            raise ParameterError("one marginal per label required")
        if any(not 0 <= v <= 1 for v in q):
            raise ParameterError("marginals must lie in [0,1]")
        qa = np.asarray(q)

        def sampler(rng):
            return tuple(np.flatnonzero(rng.random(len(qa)) < qa))

        return OffspringLaw(labels, q, sampler)

    @staticmethod
    def deterministic(labels: Sequence, subset: Sequence[int]) -> "OffspringLaw":
        subset = frozenset(subset)
        return OffspringLaw.from_table(labels, {subset: 1.0})


@dataclass
class GWTree:
    """Genealogy with per-vertex parent, label, and generation."""

    parent: list  # parent[node] = node id or None for the root
    label: list  # label[node] = label-set index, None for the root
    generations: list  # generations[g] = list of node ids
    labels: tuple  # the label set itself
    requested_generations: int
    censored: bool = False
    hit_time: list = field(default_factory=list)  # optional, extraction only

    @property
    def extinct(self) -> bool:
        return not self.generations[-1]

    def z(self, n: int) -> int:
        return len(self.generations[n]) if n < len(self.generations) else 0

    @property
    def z_series(self) -> tuple:
        return tuple(len(g) for g in self.generations)

    def rows(self):
        """Parent-pointer serialization rows (vertex, parent, label, generation)."""
        for g, nodes in enumerate(self.generations):
            for v in nodes:
                yield (v, self.parent[v], self.label[v], g)


def simulate_gw(law: OffspringLaw, generations: int, seed) -> GWTree:
    """Grow a labelled tree for the given number of generations."""
    if generations < 1:
        raise ParameterError("generations must be >= 1")
    rng = np.random.default_rng(seed)
    parent: list = [None]
    label: list = [None]
    gens = [[0]]
    for _ in range(generations):
        nxt = []
        for v in gens[-1]:
            for li in law.sampler(rng):
                parent.append(v)
                label.append(int(li))
                nxt.append(len(parent) - 1)
        gens.append(nxt)
        if not nxt:
            break
    return GWTree(parent, label, gens, law.labels, generations)


def level_star_labels(d: int, r: int, base_letter: int = 0) -> tuple:
    """Words of length r ending in the base letter, first letter not its
    inverse: the label set of the embedded trees."""
    from .cayley import Alphabet, enumerate_sphere

    ab = Alphabet(d)
    forbidden_first = ab.inv(base_letter)
    return tuple(
        w
        for w in enumerate_sphere(ab, r)
        if w[-1] == base_letter and w[0] != forbidden_first
    )


@dataclass
class ExtractionResult:
    trees: list
    r: int
    base_letter: int
    labels: tuple
    n_censored_trees: int
    offspring_counts: list  # per completed vertex: number of offspring
    censored_vertices: int


def _worker_extract_tree(
    master, k, rates, r, generations, horizon, base_letter, max_events
):
    """One embedded tree: cascade of confined runs, one per tree vertex.

    The trails from distinct tree vertices occupy disjoint parts of the
    percolation structure started at stopping times, so independent
    replicate windows per vertex have the same law as one shared window.
    Budgets are global: a vertex hit at absolute time t gets horizon - t
    of simulation; a sub-run still active at its budget is censored (its
    offspring set may be incomplete).
    """
    parent: list = [None]
    label: list = [None]
    hit_time: list = [0.0]
    gens = [[0]]
    censored_tree = False
    offspring_counts = []
    censored_vertices = 0
    node_counter = 0
    for _g in range(generations):
        nxt = []
        for v in gens[-1]:
            budget = horizon - hit_time[v]
            if budget <= 0:
                censored_tree = True
                censored_vertices += 1
                continue
            node_counter += 1
            rec = run_restricted(
                rates,
                r,
                budget,
                np.random.SeedSequence(entropy=[int(master), int(k), node_counter]),
                base_letter=base_letter,
                max_events=max_events,
            )
            cut = rec.active_at_end or rec.status != "ok"
            if cut:
                censored_tree = True
                censored_vertices += 1
            else:
                kids = 0
                for w, t in rec.first_hit.items():
                    if len(w) == r and w[-1] == base_letter:
                        kids += 1
                offspring_counts.append(kids)
            for w, t in rec.first_hit.items():
                if len(w) == r and w[-1] == base_letter:
                    parent.append(v)
                    label.append(w)
                    hit_time.append(hit_time[v] + t)
                    nxt.append(len(parent) - 1)
        gens.append(nxt)
        if not nxt:
            break
    return parent, label, hit_time, gens, censored_tree, offspring_counts, censored_vertices


def extract_tau_r(
    rates: Rates,
    r: int,
    generations: int,
    trees: int,
    horizon: float,
    seed: int,
    base_letter: int = 0,
    max_events: Optional[int] = None,
    workers=None,
) -> ExtractionResult:
    """Embedded labelled trees from confined downward infection trails.

    Offspring of a tree vertex are the relative level-r words ending in
    the base letter first reached by trails confined to the vertex's
    subtree, starting when the vertex is first hit.  Horizon-censored
    vertices are flagged and excluded from the offspring samples.
    """
    if r < 1:
        raise ParameterError("r must be >= 1")
    if generations < 1 or trees < 1:
        raise ParameterError("need generations >= 1 and trees >= 1")
    labels = level_star_labels(rates.d, r, base_letter)
    res = parallel.map_replicates(
        _worker_extract_tree,
        trees,
        seed,
        args=(rates, r, generations, horizon, base_letter, max_events),
        workers=workers,
    )
    out_trees = []
    offspring = []
    n_cens = 0
    cens_vertices = 0
    label_index = {w: i for i, w in enumerate(labels)}
    for parent, label, hit_time, gens, censored, counts, cv in res:
        lab_idx = [None] + [label_index[w] for w in label[1:]]
        out_trees.append(
            GWTree(
                parent,
                lab_idx,
                gens,
                labels,
                generations,
                censored=censored,
                hit_time=hit_time,
            )
        )
        offspring.extend(counts)
        n_cens += censored
        cens_vertices += cv
    return ExtractionResult(
        trees=out_trees,
        r=r,
        base_letter=base_letter,
        labels=labels,
        n_censored_trees=n_cens,
        offspring_counts=offspring,
        censored_vertices=cens_vertices,
    )


def offspring_mean_estimate(result: ExtractionResult) -> Estimate:
    """Mean offspring number from uncensored extracted vertices."""
    counts = result.offspring_counts
    if not counts:
        raise ParameterError("no uncensored vertices to average")
    n = len(counts)
    mean = math.fsum(counts) / n
    var = math.fsum((c - mean) ** 2 for c in counts) / max(n - 1, 1)
    return Estimate(
        mean,
        math.sqrt(var / n),
        n,
        "gw_offspring_mean",
        {"censored_vertices": result.censored_vertices},
    )


def hawkes_dimension(mu: float, alpha: float) -> float:
    """Limit-set dimension -log(mu)/log(alpha) of a supercritical tree.

    Nonpositive output marks the (sub)critical regime where the limit set
    is almost surely empty.
    """
    if mu <= 0:
        raise ParameterError("mean offspring must be > 0")
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    return -math.log(mu) / math.log(alpha)


def extended_hawkes_dimension(
    q: Sequence[float], P: np.ndarray, alpha: float
) -> tuple:
    """Dimension of the ends lying in the chain's generic sequence set.

    Returns (value, empty): the formula -(h + sum_i pi_i log q_i)/log(alpha),
    with empty=True when the entropy-potential sum is negative (the
    intersection is almost surely void).  A zero marginal carrying
    stationary mass gives -inf.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    q = np.asarray(q, dtype=float)
    P = np.asarray(P, dtype=float)
    if P.shape != (len(q), len(q)):
        raise ParameterError("chain dimension must match the label count")
    pi = stationary_distribution(P)
    if np.any((q <= 0) & (pi > 0)):
        return -math.inf, True
    h = 0.0
    for i in range(len(q)):
        row = P[i]
        nz = row > 0
        h -= pi[i] * float(np.sum(row[nz] * np.log(row[nz])))
    psi_mean = float(np.sum(pi * np.log(q)))
    num = h + psi_mean
    if num < 0:
        return 0.0, True
    return -num / math.log(alpha), False


def box_count_dimension(
    tree: GWTree, alpha: float, window: Optional[tuple] = None
) -> Estimate:
    """Box-counting slope over a generation window of a surviving tree.

    Counts, per generation m, the vertices with a descendant in the last
    generation (covers of the limit set at scale alpha^m) and fits
    log N_m against m log(1/alpha).  The default window is the middle
    half of the available generations, which avoids the root and leaf
    boundary bias.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    depth = len(tree.generations) - 1
    if depth < 3 or not tree.generations[-1]:
        raise ParameterError("tree died too early for a box count")
    # vertices with a descendant at the deepest generation
    alive = set(tree.generations[-1])
    counts = [0] * (depth + 1)
    counts[depth] = len(alive)
    cur = alive
    for g in range(depth - 1, -1, -1):
        cur = {tree.parent[v] for v in cur}
        counts[g] = len(cur)
    if window is None:
        window = (max(1, depth // 4), max(2, (3 * depth) // 4))
    lo, hi = window
    if not (0 <= lo < hi <= depth):
        raise ParameterError(f"bad window {window} for depth {depth}")
    ms = np.arange(lo, hi + 1, dtype=float)
    ys = np.log([counts[int(m)] for m in ms])
    xs = ms * math.log(1.0 / alpha)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    dof = max(len(ms) - 2, 1)
    se = math.sqrt(float(resid @ resid) / dof / float(np.sum((xs - xs.mean()) ** 2)))
    return Estimate(
        float(slope),
        float(se),
        len(ms),
        "box_count_fit",
        {"window": (int(lo), int(hi)), "counts": counts},
    )
