"""Event-driven simulation of the contact process on the tree.

The default engine is a Gillespie-style next-event loop, equivalent in law
to the percolation-structure construction: every infected vertex carries
total rate 1 + sum(lambda); the next event picks an infected vertex
uniformly and is a recovery with probability 1/(1+sum) or an infection
attempt along letter i with probability lambda_i/(1+sum).  Attempts onto
already-infected vertices are generated and discarded.  Vertices are
materialized lazily, keyed by reduced word.

Coupled runs (p-thinning, rate ladders) share one event stream so that
pathwise domination holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cayley import ParameterError, Word, apply_letter

DEFAULT_SAFETY_DEPTH = 10_000

STATUS_OK = "ok"
STATUS_ABORTED_DEPTH = "aborted_depth"
STATUS_ABORTED_EVENTS = "aborted_events"
STATUS_STOPPED = "stopped"


@dataclass(frozen=True)
class Rates:
    """Symmetric infection rates: d free parameters, recovery rate fixed at 1.

    The expanded 2d-vector repeats the d rates so that letter i and its
    inverse carry the same rate.
    """

    lam: tuple

    def __post_init__(self):
        if len(self.lam) < 1:
            raise ParameterError("need at least one rate")
        for v in self.lam:
            if not (isinstance(v, (int, float)) and math.isfinite(v)) or v < 0:
                raise ParameterError(f"rates must be finite and >= 0, got {v!r}")
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))

    @property
    def d(self) -> int:
        return len(self.lam)

    @property
    def expanded(self) -> tuple:
        return self.lam + self.lam

    @property
    def total(self) -> float:
        return 2.0 * sum(self.lam)

    @staticmethod
    def isotropic(d: int, value: float) -> "Rates":
        return Rates((value,) * d)

    def scaled(self, t: float) -> "Rates":
        return Rates(tuple(t * v for v in self.lam))


@dataclass
class Snapshot:
    t: float
    r: Optional[int]  # smallest distance among infected sites, None if empty
    R: Optional[int]  # largest distance among infected sites
    level_counts: dict
    n_infected: int
    tracked: Optional[dict] = None  # word -> bool, for the tracked-word list


@dataclass
class RunRecord:
    """Observables of one trajectory."""

    seed: object
    horizon: float
    first_hit: dict = field(default_factory=dict)  # word -> first infection time
    root_reinfections: list = field(default_factory=list)
    extinction_time: Optional[float] = None
    snapshots: list = field(default_factory=list)
    status: str = STATUS_OK
    restricted: bool = False
    events: int = 0
    active_at_end: bool = False
    final_infected: int = 0
    end_time: float = 0.0  # horizon when completed, last event time when aborted

    @property
    def survived(self) -> bool:
        """Not extinct before the horizon (abort while alive counts as alive)."""
        return self.extinction_time is None

    def hits_at_level(self, n: int) -> list:
        return [w for w in self.first_hit if len(w) == n]

    def to_jsonable(self, alphabet) -> dict:
        from .cayley import word_to_str

        return {
            "seed": repr(self.seed),
            "horizon": self.horizon,
            "status": self.status,
            "restricted": self.restricted,
            "events": self.events,
            "extinction_time": self.extinction_time,
            "active_at_end": self.active_at_end,
            "final_infected": self.final_infected,
            "n_ever_infected": len(self.first_hit),
            "root_reinfections": self.root_reinfections,
            "first_hit": {
                word_to_str(w, alphabet): t for w, t in sorted(self.first_hit.items())
            },
            "snapshots": [
                {
                    "t": s.t,
                    "r": s.r,
                    "R": s.R,
                    "n_infected": s.n_infected,
                    "level_counts": {str(k): v for k, v in sorted(s.level_counts.items())},
                }
                for s in self.snapshots
            ],
        }


class _Uniforms:
    """Blockwise uniform(0,1) draws from a numpy Generator."""

    __slots__ = ("rng", "buf", "i", "n")

    def __init__(self, rng, block: int = 8192):
        self.rng = rng
        self.n = block
        self.buf = rng.random(block)
        self.i = 0

    def next(self) -> float:
        i = self.i
        if i >= self.n:
            self.buf = self.rng.random(self.n)
            i = 0
        self.i = i + 1
        return self.buf[i]


class _State:
    """Infected set with O(1) uniform pick/insert/delete and level counts."""

    __slots__ = ("words", "pos", "levels")

    def __init__(self):
        self.words: list = []
        self.pos: dict = {}
        self.levels: dict = {}

    def __len__(self):
        return len(self.words)

    def __contains__(self, w):
        return w in self.pos

    def add(self, w) -> None:
        self.pos[w] = len(self.words)
        self.words.append(w)
        lv = len(w)
        self.levels[lv] = self.levels.get(lv, 0) + 1

    def remove(self, w) -> None:
        i = self.pos.pop(w)
        last = self.words.pop()
        if i < len(self.words):
            self.words[i] = last
            self.pos[last] = i
        lv = len(w)
        c = self.levels[lv] - 1
        if c:
            self.levels[lv] = c
        else:
            del self.levels[lv]

    def min_max_level(self):
        if not self.levels:
            return None, None
        ks = self.levels.keys()
        return min(ks), max(ks)


def _validate_common(horizon: float, snapshot_times: Sequence[float]) -> list:
    if not (math.isfinite(horizon) and horizon > 0):
        raise ParameterError(f"horizon must be positive and finite, got {horizon}")
    snaps = sorted(float(t) for t in snapshot_times)
    if snaps and snaps[0] < 0:
        raise ParameterError("snapshot times must be >= 0")
    return snaps


def run(
    rates: Rates,
    horizon: float,
    seed,
    snapshot_times: Sequence[float] = (),
    stop: Optional[Callable] = None,
    truncate_depth: Optional[int] = None,
    safety_depth: int = DEFAULT_SAFETY_DEPTH,
    max_events: Optional[int] = None,
    track_words: Sequence[Word] = (),
    restrict_base: Optional[int] = None,
    transmit_cutoff: Optional[int] = None,
) -> RunRecord:
    """Simulate one trajectory started from the root.

    `truncate_depth`: infection attempts beyond this depth are discarded
    (hard truncation, used for finite-state oracles).  `safety_depth`:
    reaching this depth aborts the run with status `aborted_depth` (runaway
    supercritical guard).  `max_events`: event budget, abort with status
    `aborted_events`.  `restrict_base`: confine the process to the subtree
    obtained by removing the branch of the inverse of this letter (the run
    is then flagged restricted).  `transmit_cutoff`: vertices at this depth
    never transmit, so infection paths touch that level only at their
    endpoint.  `stop(t, n_infected, record)` may end the run early.
    """
    d = rates.d
    lam = rates.expanded
    snaps = _validate_common(horizon, snapshot_times)
    tracked = tuple(track_words)

    rng = np.random.default_rng(seed)

    rec = RunRecord(seed=seed, horizon=horizon, restricted=restrict_base is not None)
    root: Word = ()
    # infected set inlined for speed: uniform pick needs list + index map
    words: list = [root]
    pos: dict = {root: 0}
    levels: dict = {0: 1}
    first_hit = rec.first_hit
    first_hit[root] = 0.0
    reinfections = rec.root_reinfections

    cum = []
    acc = 0.0
    for v in lam:
        acc += v
        cum.append(acc)
    cum = tuple(cum)
    n_letters = 2 * d
    per_vertex = 1.0 + acc
    forbidden_root = None if restrict_base is None else (restrict_base + d) % n_letters
    budget = math.inf if max_events is None else max_events
    log1p = math.log1p

    t = 0.0
    snap_i = 0
    n_snaps = len(snaps)
    next_snap = snaps[0] if snaps else math.inf
    events = 0

    def emit_snapshots(up_to: float, strict: bool = False) -> None:
        # snapshots strictly before the next event see the pre-event state;
        # A_t is right-continuous, so a grid time landing exactly on an event
        # time is emitted after the event is applied
        nonlocal snap_i, next_snap
        while snap_i < n_snaps and (
            snaps[snap_i] < up_to or (not strict and snaps[snap_i] <= up_to)
        ):
            st = snaps[snap_i]
            if st > horizon:
                break
            if levels:
                ks = levels.keys()
                r, R = min(ks), max(ks)
            else:
                r = R = None
            rec.snapshots.append(
                Snapshot(
                    t=st,
                    r=r,
                    R=R,
                    level_counts=dict(levels),
                    n_infected=len(words),
                    tracked={w: (w in pos) for w in tracked} if tracked else None,
                )
            )
            snap_i += 1
        next_snap = snaps[snap_i] if snap_i < n_snaps else math.inf

    buf = rng.random(4096)
    bi = 0
    while words:
        if bi >= 4093:
            buf = rng.random(4096)
            bi = 0
        n_inf = len(words)
        t_next = t - log1p(-buf[bi]) / (n_inf * per_vertex)
        if t_next >= horizon:
            emit_snapshots(horizon)
            t = horizon
            break
        if next_snap < t_next:
            emit_snapshots(t_next, strict=True)
        t = t_next
        v = words[int(buf[bi + 1] * n_inf)]
        a = buf[bi + 2] * per_vertex
        bi += 3
        if a < 1.0:
            # recovery
            i = pos.pop(v)
            last = words.pop()
            if i < len(words):
                words[i] = last
                pos[last] = i
            lv = len(v)
            c = levels[lv] - 1
            if c:
                levels[lv] = c
            else:
                del levels[lv]
            if not words:
                rec.extinction_time = t
                events += 1
                emit_snapshots(horizon)
                break
        else:
            lv = len(v)
            if transmit_cutoff is None or lv < transmit_cutoff:
                x = a - 1.0
                i = 0
                while cum[i] <= x:
                    i += 1
                if v and v[-1] == (i + d) % n_letters:
                    w = v[:-1]
                    nw = lv - 1
                else:
                    w = v + (i,)
                    nw = lv + 1
                if (
                    w not in pos
                    and not (forbidden_root is not None and nw >= 1 and w[0] == forbidden_root)
                    and not (truncate_depth is not None and nw > truncate_depth)
                ):
                    if nw > safety_depth:
                        rec.status = STATUS_ABORTED_DEPTH
                        events += 1
                        break
                    pos[w] = len(words)
                    words.append(w)
                    levels[nw] = levels.get(nw, 0) + 1
                    if w not in first_hit:
                        first_hit[w] = t
                    elif nw == 0:
                        reinfections.append(t)
        events += 1
        if events >= budget and words:
            rec.status = STATUS_ABORTED_EVENTS
            break
        if stop is not None and stop(t, len(words), rec):
            rec.status = STATUS_STOPPED
            break

    rec.events = events
    if rec.status == STATUS_OK:
        emit_snapshots(horizon)
    rec.end_time = horizon if rec.status == STATUS_OK else t
    rec.final_infected = len(words)
    rec.active_at_end = len(words) > 0
    return rec


def run_restricted(
    rates: Rates,
    target_level: int,
    horizon: float,
    seed,
    base_letter: int = 0,
    max_events: Optional[int] = None,
    snapshot_times: Sequence[float] = (),
) -> RunRecord:
    """Confined run realizing downward infection trails.

    The process lives on the subtree with the branch of inv(base_letter)
    removed, and vertices at `target_level` never transmit; a level-n
    vertex is therefore ever infected iff a trail from the root stays in
    the subtree and touches level n only at that vertex.  first_hit holds
    the hit set and hit times.  A record whose infected set is still
    nonempty at the horizon (or that ran out of budget) is censored: more
    hits might have followed.
    """
    if target_level < 1:
        raise ParameterError("target_level must be >= 1")
    if not 0 <= base_letter < 2 * rates.d:
        raise ParameterError("base_letter out of range")
    return run(
        rates,
        horizon,
        seed,
        snapshot_times=snapshot_times,
        max_events=max_events,
        restrict_base=base_letter,
        transmit_cutoff=target_level,
    )


def run_coupled_thinned(
    rates: Rates,
    p: float,
    horizon: float,
    seed,
    snapshot_times: Sequence[float] = (),
    max_events: Optional[int] = None,
    safety_depth: int = DEFAULT_SAFETY_DEPTH,
) -> tuple:
    """Original and p-thinned trajectories driven by one percolation window.

    Every infection arrow carries an independent Bernoulli(p) mark; arrows
    with mark 0 act as recovery marks in the thinned structure (the source
    vertex recovers there), so the thinned infected set is contained in
    the original one at every event time.  Up to a time change the thinned
    record is a contact process with strictly smaller rates.
    """
    if not 0.0 < p < 1.0:
        raise ParameterError(f"p must be in (0,1), got {p}")
    if rates.total <= 0:
        raise ParameterError("p-thinning needs a positive infection rate")
    d = rates.d
    lam = rates.expanded
    snaps = _validate_common(horizon, snapshot_times)

    rng = np.random.default_rng(seed)
    uni = _Uniforms(rng)

    rec_a = RunRecord(seed=seed, horizon=horizon)
    rec_b = RunRecord(seed=seed, horizon=horizon)
    A = _State()
    B = _State()
    root: Word = ()
    A.add(root)
    B.add(root)
    rec_a.first_hit[root] = 0.0
    rec_b.first_hit[root] = 0.0

    cum = []
    acc = 0.0
    for v in lam:
        acc += v
        cum.append(acc)
    per_vertex = 1.0 + rates.total

    t = 0.0
    snap_i = 0
    events = 0

    def snap_state(st: _State, rec: RunRecord, at: float) -> None:
        r, R = st.min_max_level()
        rec.snapshots.append(
            Snapshot(at, r, R, dict(st.levels), len(st), None)
        )

    def emit(up_to: float, strict: bool = False) -> None:
        nonlocal snap_i
        while snap_i < len(snaps) and (
            snaps[snap_i] < min(up_to, horizon)
            or (not strict and snaps[snap_i] <= min(up_to, horizon))
        ):
            snap_state(A, rec_a, snaps[snap_i])
            snap_state(B, rec_b, snaps[snap_i])
            if not set(B.pos) <= set(A.pos):  # domination is structural
                raise AssertionError("thinned set escaped the original set")
            snap_i += 1

    while A:
        n_inf = len(A)
        dt = -math.log1p(-uni.next()) / (n_inf * per_vertex)
        t_next = t + dt
        if t_next >= horizon:
            emit(horizon)
            t = horizon
            break
        emit(t_next, strict=True)
        t = t_next

        v = A.words[int(uni.next() * n_inf)]
        a = uni.next() * per_vertex
        if a < 1.0:
            A.remove(v)
            if v in B:
                B.remove(v)
                if not B and rec_b.extinction_time is None:
                    rec_b.extinction_time = t
            if not A:
                rec_a.extinction_time = t
                events += 1
                emit(horizon)
                break
        else:
            x = a - 1.0
            i = 0
            while cum[i] <= x:
                i += 1
            w = apply_letter(v, i, d)
            xi = uni.next() < p
            if len(w) > safety_depth:
                rec_a.status = rec_b.status = STATUS_ABORTED_DEPTH
                events += 1
                break
            if xi:
                if w not in A:
                    A.add(w)
                    if w not in rec_a.first_hit:
                        rec_a.first_hit[w] = t
                    elif w == root:
                        rec_a.root_reinfections.append(t)
                if v in B and w not in B:
                    B.add(w)
                    if w not in rec_b.first_hit:
                        rec_b.first_hit[w] = t
                    elif w == root:
                        rec_b.root_reinfections.append(t)
            else:
                # arrow deleted in the thinned structure: recovery mark at the
                # source; the arrow still transmits in the original process
                if w not in A:
                    A.add(w)
                    if w not in rec_a.first_hit:
                        rec_a.first_hit[w] = t
                    elif w == root:
                        rec_a.root_reinfections.append(t)
                if v in B:
                    B.remove(v)
                    if not B and rec_b.extinction_time is None:
                        rec_b.extinction_time = t
        events += 1
        if max_events is not None and events >= max_events and A:
            rec_a.status = rec_b.status = STATUS_ABORTED_EVENTS
            break

    if rec_a.status == STATUS_OK:
        emit(horizon)
    for rec, st in ((rec_a, A), (rec_b, B)):
        rec.events = events
        rec.end_time = horizon if rec.status == STATUS_OK else t
        rec.final_infected = len(st)
        rec.active_at_end = len(st) > 0
    if not set(B.pos) <= set(A.pos):
        raise AssertionError("thinned set escaped the original set")
    if not set(rec_b.first_hit) <= set(rec_a.first_hit):
        raise AssertionError("thinned ever-infected set escaped the original one")
    return rec_a, rec_b


def run_coupled_ladder(
    rates_list: Sequence[Rates],
    horizon: float,
    seed,
    snapshot_times: Sequence[float] = (),
    max_events: Optional[int] = None,
    track_words: Sequence[Word] = (),
    safety_depth: int = DEFAULT_SAFETY_DEPTH,
) -> list:
    """Nested runs at componentwise-increasing rates, one shared window.

    Process k sees a type-i arrow iff a per-arrow uniform falls below
    lambda_i^(k)/lambda_i^(top), so the infected sets are nested upward and
    increasing any rate never removes a vertex from the ever-infected set.
    """
    if not rates_list:
        raise ParameterError("need at least one rates vector")
    d = rates_list[0].d
    K = len(rates_list)
    for r in rates_list:
        if r.d != d:
            raise ParameterError("all rates must share the same d")
    for k in range(K - 1):
        lo, hi = rates_list[k].lam, rates_list[k + 1].lam
        if any(a > b for a, b in zip(lo, hi)):
            raise ParameterError("rates_list must be componentwise nondecreasing")
    top = rates_list[-1]
    lam_top = top.expanded
    if top.total <= 0:
        raise ParameterError("top rates must have a positive entry")
    snaps = _validate_common(horizon, snapshot_times)
    tracked = tuple(track_words)

    rng = np.random.default_rng(seed)
    uni = _Uniforms(rng)

    recs = [RunRecord(seed=seed, horizon=horizon) for _ in range(K)]
    states = [_State() for _ in range(K)]
    root: Word = ()
    for st, rec in zip(states, recs):
        st.add(root)
        rec.first_hit[root] = 0.0

    cum = []
    acc = 0.0
    for v in lam_top:
        acc += v
        cum.append(acc)
    per_vertex = 1.0 + top.total
    # acceptance fraction per letter and ladder level
    frac = [
        [
            (rates_list[k].expanded[i] / lam_top[i]) if lam_top[i] > 0 else 0.0
            for i in range(2 * d)
        ]
        for k in range(K)
    ]

    t = 0.0
    snap_i = 0
    events = 0
    top_state = states[-1]

    def emit(up_to: float, strict: bool = False) -> None:
        nonlocal snap_i
        while snap_i < len(snaps) and (
            snaps[snap_i] < min(up_to, horizon)
            or (not strict and snaps[snap_i] <= min(up_to, horizon))
        ):
            at = snaps[snap_i]
            for st, rec in zip(states, recs):
                r, R = st.min_max_level()
                rec.snapshots.append(
                    Snapshot(
                        at,
                        r,
                        R,
                        dict(st.levels),
                        len(st),
                        {w: (w in st) for w in tracked} if tracked else None,
                    )
                )
            snap_i += 1

    while top_state:
        n_inf = len(top_state)
        dt = -math.log1p(-uni.next()) / (n_inf * per_vertex)
        t_next = t + dt
        if t_next >= horizon:
            emit(horizon)
            t = horizon
            break
        emit(t_next, strict=True)
        t = t_next

        v = top_state.words[int(uni.next() * n_inf)]
        a = uni.next() * per_vertex
        if a < 1.0:
            for st, rec in zip(states, recs):
                if v in st:
                    st.remove(v)
                    if not st and rec.extinction_time is None:
                        rec.extinction_time = t
            if not top_state:
                events += 1
                emit(horizon)
                break
        else:
            x = a - 1.0
            i = 0
            while cum[i] <= x:
                i += 1
            w = apply_letter(v, i, d)
            if len(w) > safety_depth:
                for rec in recs:
                    rec.status = STATUS_ABORTED_DEPTH
                events += 1
                break
            u_arrow = uni.next()
            for k in range(K):
                if u_arrow < frac[k][i] and v in states[k] and w not in states[k]:
                    states[k].add(w)
                    if w not in recs[k].first_hit:
                        recs[k].first_hit[w] = t
                    elif w == root:
                        recs[k].root_reinfections.append(t)
        events += 1
        if max_events is not None and events >= max_events and top_state:
            for rec in recs:
                rec.status = STATUS_ABORTED_EVENTS
            break

    if recs[-1].status == STATUS_OK:
        emit(horizon)
    for st, rec in zip(states, recs):
        rec.events = events
        rec.end_time = horizon if rec.status == STATUS_OK else t
        rec.final_infected = len(st)
        rec.active_at_end = len(st) > 0
    for k in range(K - 1):
        if not set(recs[k].first_hit) <= set(recs[k + 1].first_hit):
            raise AssertionError("ladder nesting violated")
    return recs


def replicate_seed(master: int, k: int) -> np.random.SeedSequence:
    """Counter-based replicate seed: reproducible in isolation and in pools."""
    return np.random.SeedSequence(entropy=[int(master), int(k)])
