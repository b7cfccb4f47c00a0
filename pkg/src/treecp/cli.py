"""Command-line front end: simulate, estimate, phase, report, gw.

Configuration comes from flags, optionally seeded from a JSON config file
(flags override the file).  Every output file starts with a header block
echoing the version, the full configuration, and the seed, so a result
can be reproduced from the file alone; elapsed wall-clock goes to stderr
to keep reruns byte-identical.  The TREECP_THREADS environment variable
bounds the replicate worker pool; results do not depend on it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import Optional

import numpy as np

from . import __version__, estimators, gwtree, phase, spectral
from .cayley import Alphabet, ParameterError, word_from_str, word_to_str
from .engine import Rates, replicate_seed, run
from .spectral import NonConvergenceError, OutOfDomainError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ParameterError(f"expected comma-separated reals, got {text!r}")


def _header_lines(config: dict) -> list:
    cfg = json.dumps(config, sort_keys=True)
    return [
        f"# treecp {__version__}",
        f"# config: {cfg}",
        f"# seed: {config.get('seed')}",
    ]


def _write_csv(path: str, config: dict, columns: list, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in _header_lines(config):
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _write_json(path: str, config: dict, payload: dict) -> None:
    doc = {
        "meta": {"tool": "treecp", "version": __version__, "config": config},
        **payload,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ParameterError("config file must hold a JSON object")
    return doc


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """File values fill in only the flags the user left at their defaults."""
    cfg = _load_config_file(getattr(args, "config", None))
    merged = vars(args).copy()
    merged.pop("config", None)
    merged.pop("func", None)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, val in cfg.items():
        if key in merged and merged[key] == defaults.get(key):
            merged[key] = val
    return merged


def _rates_from(cfg: dict) -> Rates:
    if not cfg.get("rates"):
        raise ParameterError("--rates is required")
    vals = cfg["rates"] if isinstance(cfg["rates"], (list, tuple)) else _parse_floats(cfg["rates"])
    if cfg.get("d") and int(cfg["d"]) != len(vals):
        raise ParameterError(f"--d {cfg['d']} disagrees with {len(vals)} rates")
    return Rates(tuple(vals))


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict) -> int:
    rates = _rates_from(cfg)
    ab = Alphabet(rates.d)
    horizon = float(cfg["horizon"])
    runs = int(cfg["runs"])
    seed = int(cfg["seed"])
    if cfg.get("snapshot_times"):
        times = (
            tuple(cfg["snapshot_times"])
            if isinstance(cfg["snapshot_times"], (list, tuple))
            else _parse_floats(cfg["snapshot_times"])
        )
    else:
        k = int(cfg.get("snapshots") or 10)
        times = tuple(horizon * i / k for i in range(k + 1))
    trunc = int(cfg["truncate_depth"]) if cfg.get("truncate_depth") else None
    budget = int(cfg["max_events"]) if cfg.get("max_events") else None

    out = _ensure_outdir(cfg["out_dir"])
    snap_rows = []
    summaries = []
    for k_rep in range(runs):
        rec = run(
            rates,
            horizon,
            replicate_seed(seed, k_rep),
            snapshot_times=times,
            truncate_depth=trunc,
            max_events=budget,
        )
        summaries.append(
            {
                "replicate": k_rep,
                "status": rec.status,
                "survived": rec.survived,
                "extinction_time": rec.extinction_time,
                "events": rec.events,
                "n_ever_infected": len(rec.first_hit),
                "final_infected": rec.final_infected,
                "n_root_reinfections": len(rec.root_reinfections),
            }
        )
        for s in rec.snapshots:
            for lvl in sorted(s.level_counts) or [None]:
                snap_rows.append(
                    (
                        k_rep,
                        s.t,
                        s.r,
                        s.R,
                        lvl,
                        s.level_counts.get(lvl, 0) if lvl is not None else 0,
                    )
                )
    n_surv = sum(1 for s in summaries if s["survived"])
    _write_csv(
        os.path.join(out, "snapshots.csv"),
        cfg,
        ["replicate", "t", "r", "R", "n", "N_n"],
        snap_rows,
    )
    _write_json(
        os.path.join(out, "simulate_summary.json"),
        cfg,
        {
            "runs": _jsonable(summaries),
            "survival_frequency": n_surv / runs,
            "alphabet_d": ab.d,
        },
    )
    return EXIT_OK


def cmd_estimate(cfg: dict) -> int:
    rates = _rates_from(cfg)
    ab = Alphabet(rates.d)
    target = cfg["target"]
    seed = int(cfg["seed"])
    runs = int(cfg["runs"])
    horizon = float(cfg.get("horizon") or 20.0)
    trunc = int(cfg["truncate_depth"]) if cfg.get("truncate_depth") else None
    budget = int(cfg["max_events"]) if cfg.get("max_events") else None
    out = _ensure_outdir(cfg["out_dir"])
    rows = []
    cols = ["estimator", "params", "value", "stderr", "n_samples", "horizon", "seed"]

    def add(name: str, params: str, est: estimators.Estimate):
        rows.append((name, params, est.value, est.stderr, est.n_samples, horizon, seed))

    if target == "u":
        word = word_from_str(cfg.get("word") or "", ab)
        est = estimators.estimate_u(word, rates, runs, horizon, seed, trunc, budget)
        add("u", word_to_str(word, ab), est)
    elif target == "u_t":
        word = word_from_str(cfg.get("word") or "", ab)
        t = float(cfg["t"])
        est = estimators.estimate_u_t(word, t, rates, runs, horizon, seed, trunc, budget)
        add("u_t", f"{word_to_str(word, ab)}@t={t}", est)
    elif target == "beta":
        letter = ab.parse_letter(cfg.get("letter") or "a1")
        est = estimators.estimate_beta(
            letter, rates, int(cfg.get("n_max") or 6), runs, seed,
            horizon=horizon, truncate_depth=trunc, max_events=budget,
        )
        add("beta", ab.letter_name(letter), est)
    elif target == "eta":
        grid = (
            _parse_floats(cfg["t_grid"])
            if cfg.get("t_grid")
            else tuple(horizon * i / 8 for i in range(1, 9))
        )
        est = estimators.estimate_eta(rates, grid, runs, seed, trunc, budget)
        add("eta", f"t_grid={','.join(str(t) for t in grid)}", est)
    elif target == "theta":
        n = int(cfg.get("n") or 4)
        rho = float(cfg.get("rho") or 1.0)
        est = estimators.estimate_theta(
            rho, rates, n, runs, horizon, seed, trunc, budget
        )
        if est.flags.get("censored"):
            add(f"theta_{rho}[censored]", f"n={n}", est)
        else:
            add(f"theta_{rho}", f"n={n}", est)
    elif target in ("H", "b"):
        n = int(cfg.get("n") or 3)
        rho = float(cfg.get("rho") or 1.0)
        H_n = estimators.estimate_H(rho, n, rates, runs, horizon, seed, trunc, budget)
        if target == "H":
            _write_json(
                os.path.join(out, "h_matrix.json"),
                cfg,
                {
                    "n": n,
                    "rho": rho,
                    "entries": _jsonable(H_n.entries),
                    "stderr": _jsonable(H_n.stderr),
                    "letters": [ab.letter_name(i) for i in ab.letters()],
                },
            )
            for i in ab.letters():
                for j in ab.letters():
                    rows.append(
                        (
                            "H",
                            f"n={n},i={ab.letter_name(i)},j={ab.letter_name(j)}",
                            float(H_n.entries[i, j]),
                            float(H_n.stderr[i, j]),
                            H_n.n_samples,
                            horizon,
                            seed,
                        )
                    )
        else:
            H_n1 = estimators.estimate_H(
                rho, n + 1, rates, runs, horizon, seed + 1, trunc, budget
            )
            bv = estimators.calibrate_b(H_n, H_n1)
            for i in ab.letters():
                rows.append(
                    (
                        "b",
                        f"depth={n},letter={ab.letter_name(i)},residual={bv.residual!r}",
                        bv.b[i],
                        float("nan"),
                        runs,
                        horizon,
                        seed,
                    )
                )
    elif target == "profile":
        grid = _parse_floats(cfg.get("s_grid") or "")
        if len(grid) < 2 or any(s <= 0 for s in grid) or list(grid) != sorted(grid):
            raise ParameterError("--s-grid must be a positive increasing list")
        n = int(cfg.get("n") or 5)
        prof = estimators.estimate_growth_profile(
            rates, grid, n, runs, seed, trunc, budget
        )
        for s, est in zip(prof.s_grid, prof.values):
            rows.append(
                ("profile_phi", f"s={s},n={n}", est.value, est.stderr, runs, horizon, seed)
            )
        rows.append(("profile_s1", "", prof.s1, None, runs, horizon, seed))
        rows.append(("profile_s2", "", prof.s2, None, runs, horizon, seed))
        if prof.flags:
            rows.append(
                ("profile_flags", json.dumps(prof.flags, sort_keys=True), None, None,
                 runs, horizon, seed)
            )
    else:
        raise ParameterError(f"unknown estimate target {target!r}")

    _write_csv(os.path.join(out, f"estimate_{target}.csv"), cfg, cols, rows)
    return EXIT_OK


def cmd_phase(cfg: dict) -> int:
    d = int(cfg["d"])
    seed = int(cfg["seed"])
    mode = cfg.get("mode") or "analytic"
    out = _ensure_outdir(cfg["out_dir"])
    if cfg.get("directions"):
        dirs = []
        for part in cfg["directions"].split(";"):
            vec = _parse_floats(part)
            if len(vec) != d:
                raise ParameterError(f"direction {part!r} has {len(vec)} entries, want d={d}")
            dirs.append(vec)
    else:
        k = int(cfg.get("rays") or 3)
        rng = np.random.default_rng(replicate_seed(seed, 0xD17))
        dirs = []
        for _ in range(k):
            v = rng.uniform(0.2, 1.0, size=d)
            dirs.append(tuple(float(x) for x in v / np.linalg.norm(v)))

    mc_cfg = None
    if mode == "montecarlo":
        mc_cfg = phase.MCScanConfig(
            runs_per_point=int(cfg.get("runs_per_point") or 2000),
            max_events=int(cfg.get("max_events") or 60_000),
        )
    rows = []
    for ri, direction in enumerate(dirs):
        res = phase.phase_ray_scan(direction, mode=mode, seed=seed + ri, config=mc_cfg)
        rows.append(
            (
                ";".join(repr(v) for v in direction),
                res.t1,
                res.t1_ci[0],
                res.t1_ci[1],
                res.t2,
                res.t2_ci[0],
                res.t2_ci[1],
                res.mode,
            )
        )
        if mode == "analytic":
            _write_json(
                os.path.join(out, f"singularity_{ri}.json"),
                cfg,
                {"ray": ri, "direction": list(direction), "result": _jsonable(res.diagnostics)},
            )
    _write_csv(
        os.path.join(out, "phase.csv"),
        cfg,
        ["direction", "t1", "t1_lo", "t1_hi", "t2", "t2_lo", "t2_hi", "mode"],
        rows,
    )
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    alpha = float(cfg.get("alpha") or 0.5)
    if cfg.get("b"):
        bvals = cfg["b"] if isinstance(cfg["b"], (list, tuple)) else _parse_floats(cfg["b"])
        b = tuple(bvals) + tuple(bvals)  # symmetric expansion of d values
    elif cfg.get("b_full"):
        b = tuple(_parse_floats(cfg["b_full"]))
    else:
        raise ParameterError("need --b (d entries) or --b-full (2d entries)")
    out = _ensure_outdir(cfg["out_dir"])
    rep = spectral.dimension_report(b, alpha)
    payload = _jsonable(rep.to_jsonable())
    _write_json(os.path.join(out, "report.json"), cfg, {"report": payload})
    cols = [
        "d", "alpha", "theta1", "theta2", "delta", "delta_boundary", "delta_mu",
        "h_mu", "phi_mean", "backscatter_margin", "r_u", "isotropic",
        "criticality_margin", "at_criticality", "strong_survival",
    ]
    rows = [
        tuple(
            getattr(rep, c) if not isinstance(getattr(rep, c), bool) else int(getattr(rep, c))
            for c in cols
        )
    ]
    _write_csv(os.path.join(out, "report.csv"), cfg, cols, rows)
    return EXIT_OK


def cmd_gw(cfg: dict) -> int:
    seed = int(cfg["seed"])
    out = _ensure_outdir(cfg["out_dir"])
    mode = cfg.get("gw_mode") or "simulate"
    generations = int(cfg.get("generations") or 8)
    trees = int(cfg.get("trees") or 1)
    rows = []
    summary: dict = {"mode": mode}
    if mode == "simulate":
        q = _parse_floats(cfg.get("q") or "")
        if not q:
            raise ParameterError("--q marginals are required for gw simulate")
        labels = tuple(range(len(q)))
        law = gwtree.OffspringLaw.bernoulli(labels, q)
        forest = [
            gwtree.simulate_gw(law, generations, replicate_seed(seed, k))
            for k in range(trees)
        ]
        summary["mean_offspring"] = law.mean
        alpha = float(cfg.get("alpha") or 0.5)
        if law.mean > 0:
            summary["hawkes_dimension"] = gwtree.hawkes_dimension(law.mean, alpha)
        for ti, tree in enumerate(forest):
            for v, parent, lab, g in tree.rows():
                rows.append((ti, v, parent, lab, g))
        summary["extinct_fraction"] = sum(t.extinct for t in forest) / trees
        summary["z_series"] = [_jsonable(t.z_series) for t in forest[:50]]
    elif mode == "extract":
        rates = _rates_from(cfg)
        ab = Alphabet(rates.d)
        r = int(cfg.get("r") or 1)
        horizon = float(cfg.get("horizon") or 20.0)
        base = ab.parse_letter(cfg.get("base") or "a1")
        budget = int(cfg["max_events"]) if cfg.get("max_events") else None
        res = gwtree.extract_tau_r(
            rates, r, generations, trees, horizon, seed, base, budget
        )
        for ti, tree in enumerate(res.trees):
            for v, parent, lab, g in tree.rows():
                name = word_to_str(res.labels[lab], ab) if lab is not None else ""
                rows.append((ti, v, parent, name, g))
        summary["r"] = r
        summary["base"] = ab.letter_name(base)
        summary["labels"] = [word_to_str(w, ab) for w in res.labels]
        summary["censored_trees"] = res.n_censored_trees
        summary["censored_vertices"] = res.censored_vertices
        if res.offspring_counts:
            est = gwtree.offspring_mean_estimate(res)
            summary["offspring_mean"] = est.value
            summary["offspring_mean_stderr"] = est.stderr
    else:
        raise ParameterError(f"unknown gw mode {mode!r}")
    _write_csv(
        os.path.join(out, "trees.csv"),
        cfg,
        ["tree", "vertex_id", "parent_id", "label", "generation"],
        rows,
    )
    _write_json(os.path.join(out, "gw_summary.json"), cfg, {"summary": _jsonable(summary)})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="treecp",
        description="Contact process on homogeneous trees: simulation and numerics",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_rates=True):
        sp.add_argument("--config", help="JSON config file; flags override file values")
        sp.add_argument("--d", type=int, default=None, help="number of generators")
        if needs_rates:
            sp.add_argument("--rates", required=False, help="comma-separated d rates")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", dest="out_dir", default="results")

    sp = sub.add_parser("simulate", help="raw trajectories and snapshot series")
    common(sp)
    sp.add_argument("--horizon", type=float, required=True)
    sp.add_argument("--runs", type=int, default=100)
    sp.add_argument("--snapshot-times", dest="snapshot_times", default=None)
    sp.add_argument("--snapshots", type=int, default=None, help="even grid size")
    sp.add_argument("--truncate-depth", dest="truncate_depth", type=int, default=None)
    sp.add_argument("--max-events", dest="max_events", type=int, default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="Monte Carlo estimators")
    common(sp)
    sp.add_argument(
        "--target",
        required=True,
        choices=["u", "u_t", "beta", "eta", "theta", "H", "b", "profile"],
    )
    sp.add_argument("--runs", type=int, default=1000)
    sp.add_argument("--horizon", type=float, default=None)
    sp.add_argument("--word", default=None, help="dot-separated word, e.g. a1.a2'")
    sp.add_argument("--t", type=float, default=None)
    sp.add_argument("--letter", default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--n-max", dest="n_max", type=int, default=None)
    sp.add_argument("--rho", type=float, default=None)
    sp.add_argument("--t-grid", dest="t_grid", default=None)
    sp.add_argument("--s-grid", dest="s_grid", default=None)
    sp.add_argument("--truncate-depth", dest="truncate_depth", type=int, default=None)
    sp.add_argument("--max-events", dest="max_events", type=int, default=None)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("phase", help="phase-boundary scans along rays")
    common(sp, needs_rates=False)
    sp.add_argument("--mode", choices=["analytic", "montecarlo"], default="analytic")
    sp.add_argument("--directions", default=None, help="semicolon-separated rays")
    sp.add_argument("--rays", type=int, default=None, help="number of random rays")
    sp.add_argument("--runs-per-point", dest="runs_per_point", type=int, default=None)
    sp.add_argument("--max-events", dest="max_events", type=int, default=None)
    sp.set_defaults(func=cmd_phase)

    sp = sub.add_parser("report", help="dimension report from a calibrated b vector")
    common(sp, needs_rates=False)
    sp.add_argument("--b", default=None, help="d symmetric entries")
    sp.add_argument("--b-full", dest="b_full", default=None, help="all 2d entries")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gw", help="labelled Galton-Watson trees")
    common(sp)
    sp.add_argument("--gw-mode", dest="gw_mode", choices=["simulate", "extract"],
                    default="simulate")
    sp.add_argument("--q", default=None, help="marginals for simulate mode")
    sp.add_argument("--generations", type=int, default=8)
    sp.add_argument("--trees", type=int, default=1)
    sp.add_argument("--r", type=int, default=1)
    sp.add_argument("--horizon", type=float, default=20.0)
    sp.add_argument("--base", default="a1")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--max-events", dest="max_events", type=int, default=None)
    sp.set_defaults(func=cmd_gw)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.monotonic()
    try:
        cfg = _merge_config(args, parser)
        cfg["command"] = args.command
        code = args.func(cfg)
    except ParameterError as e:
        print(f"treecp: invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonConvergenceError, OutOfDomainError) as e:
        print(f"treecp: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"treecp: i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"treecp: done in {time.monotonic() - t0:.2f}s wall clock", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
