"""Batch experiment runner.

Every subcommand reads an INI-style config with three typed sections::

    [run]       command, seed, workers, out_dir, label
    [graph]     family and family parameters
    [params]    operation parameters (see ``PARAMS``)

Command-line flags override the file: ``--seed``, ``--workers``,
``--out-dir``, ``--graph FAMILY`` and ``--set [section.]key=value`` (section
defaults to ``params``).  Each run writes its data files plus
``manifest.json`` into the output directory.  Exit codes: 0 on success or
PASS, 2 on a verification FAIL, 1 on any error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np

from . import __version__

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
COMMANDS = ("build-graph", "green", "capacity", "kill-prob", "doob-check", "sample-gff", "sample-soup",
            "connection", "scan", "gw-mean", "verify-iso", "verify-caplaw", "verify-2d", "report")
REQUIRED = object()


class ConfigError(ValueError):
    """Schema violation; the message names the offending line and field."""


# -------------------------------------------------------------------- types
def _int(s):
    f = float(s)
    if f != int(f):
        raise ValueError("not an integer")
    return int(f)


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _list(conv):
    def parse(s):
        return [conv(t) for t in s.replace(";", ",").split(",") if t.strip()]
    return parse


def _point(s):
    """A vertex id ``"3"`` or a lattice point ``"1,0"`` / ``"(1, 0)"``."""
    t = s.strip().strip("()[]")
    parts = [p for p in t.split(",") if p.strip()]
    if len(parts) == 1:
        return _int(parts[0])
    return tuple(_int(p) for p in parts)


def _points(s):
    """Points separated by ``;``: ``"0,0; 1,0"`` (plain ids may use commas)."""
    if ";" not in s and "(" not in s:
        return [_int(t) for t in s.split(",") if t.strip()] if s.strip() else []
    return [_point(t) for t in s.replace(")", ";").replace("(", "").split(";") if t.strip().strip(",")]


TYPES = {"int": _int, "float": float, "str": str.strip, "bool": _bool, "ints": _list(_int),
         "floats": _list(float), "strs": _list(str.strip), "point": _point, "points": _points,
         "optfloat": _opt_float}

RUN_KEYS = {"command": ("str", None), "seed": ("int", 0), "workers": ("int", 1), "out_dir": ("str", "out"),
            "label": ("str", "")}
GRAPH_KEYS = {"family": ("str", None), "dim": ("int", None), "radius": ("int", None), "depth": ("int", None),
              "d": ("int", None), "alpha": ("float", None), "kappa": ("float", None), "weight": ("float", None),
              "boundary": ("str", None), "n0": ("int", None), "step": ("int", None), "growth": ("float", None),
              "c": ("float", None), "path": ("str", None), "length": ("int", None), "killed": ("ints", None)}
HARMONIC = {"harmonic": ("str", "const"), "harmonic_seed": ("int", 11), "harmonic_lo": ("float", 0.5),
            "harmonic_hi": ("float", 2.0)}
PARAMS = {
    "build-graph": {},
    "green": {"points": ("points", None)},
    "capacity": {"set": ("points", REQUIRED), "nested": ("bool", False), "tol": ("float", 0.02)},
    "kill-prob": {"policy": ("str", "killed")},
    "doob-check": dict(HARMONIC, tol=("float", 1e-9), skeleton_samples=("int", 0), skeleton_from=("int", 0)),
    "sample-gff": {"n": ("int", 1), "level": ("optfloat", None), "sampler": ("str", "factor")},
    "sample-soup": {"u": ("float", REQUIRED), "recipe": ("str", "killed"), "set": ("points", None),
                    "replicas": ("int", 1)},
    "connection": {"x": ("point", 0), "L": ("int", REQUIRED), "h": ("float", 0.0), "N": ("int", 1000),
                   "mode": ("str", "level"), "u": ("float", 0.0), "pass_if_below": ("optfloat", None),
                   "pass_if_above": ("optfloat", None)},
    "scan": {"x": ("point", 0), "Ls": ("ints", REQUIRED), "hs": ("floats", REQUIRED), "N": ("int", 1000),
             "theta": ("float", 0.05), "upper_below": ("optfloat", None), "min_r2": ("float", 0.9)},
    "gw-mean": {"u": ("float", REQUIRED), "generations": ("ints", [0, 1, 2]), "N": ("int", 0),
                "explore": ("str", "none"), "h": ("float", 0.0), "start_generation": ("str", "auto"),
                "explore_generations": ("int", 12), "budget": ("int", 10 ** 6), "explore_N": ("int", 1000),
                "level_Ls": ("ints", None), "level_h": ("float", 0.0), "level_N": ("int", 1000),
                "pass_if_above": ("optfloat", None)},
    "verify-iso": dict(HARMONIC, us=("floats", [0.25, 0.5, 1.0]), n_subs=("ints", [2, 4, 8]), N=("int", 10 ** 5),
                       probes=("points", None)),
    "verify-caplaw": dict(HARMONIC, us=("floats", [0.25, 0.5, 1.0]), n_subs=("ints", [2, 4, 8]),
                          N=("int", 10 ** 5), x0=("point", 0), nsigma=("float", 3.0)),
    "verify-2d": {"radius": ("int", 16), "us": ("floats", [0.25]), "N": ("int", 20000), "n_subs": ("ints", [2]),
                  "x0": ("point", (1, 0)), "iso_u": ("optfloat", None), "emptiness_radius": ("int", 0),
                  "emptiness_u": ("float", 0.5), "emptiness_N": ("int", 10000)},
    "report": {"manifests": ("strs", REQUIRED)},
}
NEEDS_GRAPH = set(COMMANDS) - {"verify-2d", "report"}


# --------------------------------------------------------------- config
@dataclass
class ExperimentConfig:
    """Resolved, serializable run description."""

    command: str
    graph: dict
    params: dict
    seed: int = 0
    workers: int = 1
    out_dir: str = "out"
    label: str = ""
    base_dir: str = "."

    def identity(self):
        """Everything that determines the outputs (not where they go)."""
        g = {k: v for k, v in self.graph.items() if v is not None}
        return {"command": self.command, "graph": g, "params": self.params, "seed": self.seed,
                "workers": self.workers}

    def hash(self):
        return hashlib.sha256(json.dumps(_jsonable(self.identity()), sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    label: str
    config_hash: str
    version: str
    wall_time: float
    started: str
    outputs: list
    verdict: str
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _locate(text, section, key):
    """1-based line of ``key`` inside ``[section]`` (or of the section header)."""
    cur, hdr = None, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
            if cur == section:
                hdr = i
            continue
        if cur == section and key is not None:
            k = s.split("=", 1)[0].split(":", 1)[0].strip()
            if k == key:
                return i
    return hdr


def _convert(tname, raw, where):
    try:
        return TYPES[tname](raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError("%s: expected %s, got %r (%s)" % (where, tname, raw, exc)) from None


def _where(path, text, section, key):
    line = _locate(text, section, key) if text else None
    loc = "%s:%d" % (path, line) if line else (path or "<command line>")
    return "%s: field %s.%s" % (loc, section, key)


def load_config(path=None, command=None, overrides=(), graph=None, seed=None, workers=None, out_dir=None):
    """Parse and validate a config file plus command-line overrides."""
    text, raw = "", {"run": {}, "graph": {}, "params": {}}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("%s: cannot read config (%s)" % (path, exc.strerror)) from None
        cp = configparser.ConfigParser(interpolation=None, strict=True)
        cp.optionxform = str
        try:
            cp.read_string(text, source=path)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
        if not cp.sections():
            raise ConfigError("%s: config is empty (need at least a [run] section)" % path)
        for sec in cp.sections():
            if sec not in raw:
                raise ConfigError("%s:%s: unknown section [%s] (known: run, graph, params)"
                                  % (path, _locate(text, sec, None), sec))
            raw[sec].update(cp[sec])
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--set %r: expected key=value" % item)
        k, v = item.split("=", 1)
        sec, _, key = k.strip().rpartition(".")
        sec = sec or "params"
        if sec not in raw:
            raise ConfigError("--set %r: unknown section %r" % (item, sec))
        raw[sec][key] = v
    if graph is not None:
        raw["graph"]["family"] = graph

    run = {}
    for k, v in raw["run"].items():
        if k not in RUN_KEYS:
            raise ConfigError("%s: unknown field (known: %s)" % (_where(path, text, "run", k), ", ".join(RUN_KEYS)))
        run[k] = _convert(RUN_KEYS[k][0], v, _where(path, text, "run", k))
    cmd = command or run.get("command")
    if cmd is None:
        raise ConfigError("%s: no command given (field run.command or positional argument)" % (path or "<command line>"))
    if cmd not in COMMANDS:
        raise ConfigError("%s: unknown command %r (known: %s)" % (_where(path, text, "run", "command"), cmd,
                                                                   ", ".join(COMMANDS)))
    gspec = {}
    for k, v in raw["graph"].items():
        if k not in GRAPH_KEYS:
            raise ConfigError("%s: unknown field (known: %s)" % (_where(path, text, "graph", k), ", ".join(GRAPH_KEYS)))
        gspec[k] = _convert(GRAPH_KEYS[k][0], v, _where(path, text, "graph", k))
    if cmd in NEEDS_GRAPH and "family" not in gspec:
        raise ConfigError("%s: command %s needs graph.family" % (_where(path, text, "graph", "family"), cmd))
    if gspec.get("family") == "custom-file" and "path" in gspec and path is not None:
        gspec["path"] = os.path.join(os.path.dirname(os.path.abspath(path)), gspec["path"])
    schema = PARAMS[cmd]
    params = {}
    for k, v in raw["params"].items():
        if k not in schema:
            raise ConfigError("%s: unknown field for %s (known: %s)"
                              % (_where(path, text, "params", k), cmd, ", ".join(schema) or "none"))
        params[k] = _convert(schema[k][0], v, _where(path, text, "params", k))
    for k, (_, default) in schema.items():
        if k not in params:
            if default is REQUIRED:
                raise ConfigError("%s: required field missing" % _where(path, text, "params", k))
            params[k] = default
    cfg = ExperimentConfig(cmd, gspec, params, run.get("seed", 0), run.get("workers", 1),
                           run.get("out_dir", "out"), run.get("label", ""),
                           os.path.dirname(os.path.abspath(path)) if path else os.getcwd())
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if out_dir is not None:
        cfg.out_dir = out_dir
    if cfg.workers < 1:
        raise ConfigError("%s: workers must be >= 1" % _where(path, text, "run", "workers"))
    return cfg


# ------------------------------------------------------------------ output
def _jsonable(x):
    if is_dataclass(x) and not isinstance(x, type):
        return _jsonable(x.to_dict() if hasattr(x, "to_dict") else asdict(x))
    if isinstance(x, dict):
        return {(k if isinstance(k, str) else str(_jsonable(k))): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.12g" % v
    return v


class Outputs:
    """Collects the files written by one run."""

    def __init__(self, out_dir):
        self.dir = out_dir
        self.files = []

    def path(self, name):
        os.makedirs(self.dir, exist_ok=True)
        self.files.append(name)
        return os.path.join(self.dir, name)

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -------------------------------------------------------------- commands
def _spec(cfg):
    from .graph import GraphSpec
    p = {k: v for k, v in cfg.graph.items() if k != "family" and v is not None}
    return GraphSpec(cfg.graph["family"], p)


def _graph(cfg):
    from .graph import build_graph
    return build_graph(_spec(cfg))


def _vid(g, p):
    return g.vertex_of(p) if isinstance(p, tuple) else int(p)


def _harmonic(g, p):
    from .graph import GraphError
    from .potential import HarmonicFn, kill_probability, solve_harmonic
    kind = p["harmonic"]
    if kind == "const":
        return HarmonicFn.constant(g)
    if kind in ("kill", "surv"):
        hk, hs = kill_probability(g, "killed")
        return hk if kind == "kill" else hs
    if kind == "solved":
        c = np.random.default_rng(p["harmonic_seed"]).uniform(p["harmonic_lo"], p["harmonic_hi"], g.n)
        h = solve_harmonic(g, c, c if np.any(g.leak > 0) else None)
        h.name = "solved"
        return h
    raise GraphError("harmonic must be const, kill, surv or solved (got %r)" % kind)


def cmd_build_graph(cfg, out):
    g = _graph(cfg)
    with open(out.path("graph.txt"), "w") as fh:
        fh.write(g.to_text())
    return None, {"n": g.n, "m": g.m, "kappa_total": float(g.kappa.sum()), "leak_total": float(g.leak.sum())}


def cmd_green(cfg, out):
    from .potential import GreenOracle
    g = _graph(cfg)
    pts = cfg.params["points"]
    ids = np.arange(g.n) if pts is None else np.array([_vid(g, q) for q in pts], dtype=np.int64)
    M = GreenOracle(g).matrix(ids)
    out.csv("green.csv", ["x", "y", "g"], ((int(a), int(b), M[i, j]) for i, a in enumerate(ids)
                                           for j, b in enumerate(ids)))
    return None, {"g_diag_max": float(np.max(np.diag(M))), "n_points": int(len(ids))}


def cmd_capacity(cfg, out):
    from .potential import capacity, equilibrium_measure
    g = _graph(cfg)
    F = [_vid(g, q) for q in cfg.params["set"]]
    eq = equilibrium_measure(g, F)
    out.csv("capacity.csv", ["vertex", "equilibrium"], ((int(x), eq.weights[x]) for x in eq.support))
    summ = {"capacity": eq.total}
    if cfg.params["nested"]:
        val, log = capacity(_spec(cfg), cfg.params["set"], tol=cfg.params["tol"])
        out.csv("capacity_log.csv", ["radius", "capacity"], zip(log.radii, log.values))
        summ.update(nested_capacity=val, stable=bool(log.stable))
    return None, summ


def cmd_kill_prob(cfg, out):
    from .potential import kill_probability
    g = _graph(cfg)
    hk, hs = kill_probability(g, cfg.params["policy"])
    out.csv("kill_prob.csv", ["vertex", "h_kill", "h_surv"], zip(range(g.n), hk.values, hs.values))
    return None, {"h_kill_min": float(hk.values.min()), "h_kill_max": float(hk.values.max())}


def _anchor_error(dg):
    from .graph import CableCoordinate
    err = 0.0
    g = dg.base
    for e in range(g.m):
        u, v = (int(t) for t in g.edges[e])
        r = g.rho[e]
        for frac in (0.25, 0.5, 0.8):
            a = dg.psi(CableCoordinate("edge", e, u, frac * r)).normalized(dg.graph)
            b = dg.psi(CableCoordinate("edge", e, v, (1 - frac) * r)).normalized(dg.graph)
            err = max(err, abs(a.offset - b.offset))
    return err


def cmd_doob_check(cfg, out):
    from .doob import check_harmonic, conditioned_skeleton_check, doob_graph, verify_green_relation
    p = cfg.params
    g = _graph(cfg)
    h = _harmonic(g, p)
    cert = check_harmonic(g, h, p["tol"])
    res = {"harmonic": h.name, "max_residual": cert.max_residual, "unchecked": cert.unchecked,
           "harmonic_passed": cert.passed}
    ok = cert.passed
    if cert.passed:
        dg = doob_graph(g, h, p["tol"])
        res["green_relation_error"] = verify_green_relation(dg)
        res["anchor_error"] = _anchor_error(dg)
        ok = ok and res["green_relation_error"] <= p["tol"] and res["anchor_error"] <= 1e-12
    if p["skeleton_samples"] > 0:
        sk = conditioned_skeleton_check(g, p["skeleton_samples"], cfg.seed, p["skeleton_from"])
        res.update(skeleton_max_z=sk.max_z, skeleton_passed=sk.passed)
        ok = ok and sk.passed
    out.json("doob.json", res)
    return ok, {k: v for k, v in res.items() if k != "unchecked"}


def cmd_sample_gff(cfg, out):
    from .gff import sample_discrete_gff, sample_openness, sample_tree_gff, write_field_csv, write_openness_csv
    p = cfg.params
    g = _graph(cfg)
    if p["sampler"] == "tree":
        batch = sample_tree_gff(g, p["n"], cfg.seed)
    elif p["sampler"] == "factor":
        batch = sample_discrete_gff(g, p["n"], cfg.seed)
    else:
        raise ValueError("sampler must be factor or tree")
    write_field_csv(out.path("field.csv"), batch)
    summ = {"n": p["n"], "mean": float(batch.values.mean())}
    if p["level"] is not None:
        op = sample_openness(batch, g, p["level"], seed=cfg.seed)
        write_openness_csv(out.path("openness.csv"), op, g)
        summ["open_fraction"] = float(np.mean(op.open))
    return None, summ


def cmd_sample_soup(cfg, out):
    from .interlacements import (classify, dump_soup, killed_setup, sample_killed_soup, sample_window_soup,
                                 window_setup)
    p = cfg.params
    g = _graph(cfg)
    if p["recipe"] == "killed":
        st = killed_setup(g)
        draw = lambda r: sample_killed_soup(g, p["u"], cfg.seed, r, setup=st)  # noqa: E731
    elif p["recipe"] == "window":
        if not p["set"]:
            raise ValueError("window recipe needs params.set")
        K = [_vid(g, q) for q in p["set"]]
        st = window_setup(g, K)
        draw = lambda r: sample_window_soup(g, K, p["u"], cfg.seed, r, setup=st)  # noqa: E731
    else:
        raise ValueError("recipe must be killed or window")
    rows = []
    with open(out.path("soup.txt"), "w") as fh:
        for r in range(p["replicas"]):
            s = draw(r)
            dump_soup(s, fh)
            _, c = classify(s)
            rows.append((r, len(s), c["KK"], c["SS"], c["KS"], c["SK"]))
    out.csv("classes.csv", ["replica", "n", "KK", "SS", "KS", "SK"], rows)
    return None, {"mean_trajectories": float(np.mean([r[1] for r in rows]))}


def _threshold_verdict(value, p):
    ok = None
    if p.get("pass_if_below") is not None:
        ok = value <= p["pass_if_below"]
    if p.get("pass_if_above") is not None:
        ok = (ok is not False) and value >= p["pass_if_above"]
    return ok


def cmd_connection(cfg, out):
    from .percolation import connection_prob, interlacement_connection, write_estimates_csv
    p = cfg.params
    g = _graph(cfg)
    if p["mode"] == "level":
        est = connection_prob(g, p["x"], p["L"], p["h"], p["N"], cfg.seed)
    elif p["mode"] == "interlacement":
        est = interlacement_connection(g, p["x"], p["L"], p["u"], p["N"], cfg.seed)
    else:
        raise ValueError("mode must be level or interlacement")
    write_estimates_csv(out.path("connection.csv"), cfg.graph["family"], [est], cfg.seed)
    return _threshold_verdict(est.estimate, p), {"estimate": est.estimate, "ci_lo": est.ci_lo, "ci_hi": est.ci_hi,
                                                  "L": est.L, "h": est.h}


def cmd_scan(cfg, out):
    from .percolation import decay_fit, scan_levels, write_estimates_csv
    p = cfg.params
    g = _graph(cfg)
    res = scan_levels(g, p["x"], p["Ls"], p["hs"], p["N"], cfg.seed, theta=p["theta"])
    ests = [res.table[(float(h), L)] for h in res.hs for L in res.Ls]
    write_estimates_csv(out.path("scan.csv"), cfg.graph["family"], ests, cfg.seed)
    fits = {}
    for h in res.hs:
        row = [res.table[(float(h), L)] for L in res.Ls]
        vals = [e.estimate for e in row]
        dec = all(b < a for a, b in zip(vals, vals[1:]))
        fit = decay_fit(res.Ls, vals, [(e.ci_lo, e.ci_hi) for e in row]) if len(row) >= 3 else None
        fits[float(h)] = {"decreasing": dec, "rate": fit.rate if fit else None, "r2": fit.r2 if fit else None}
    info = {"bracket": res.bracket, "L_max": res.L_max, "monotone": res.monotone, "theta": res.theta,
            "sensitivity": {str(k): v for k, v in res.sensitivity.items()}, "decay": fits}
    ok = None
    if p["upper_below"] is not None:
        good = [h for h, f in fits.items() if h < p["upper_below"] and f["decreasing"]
                and f["r2"] is not None and f["r2"] >= p["min_r2"]]
        info["decaying_levels"] = good
        ok = res.bracket[1] < p["upper_below"] and bool(good)
    out.json("scan.json", info)
    return ok, {"h_lo": res.bracket[0], "h_hi": res.bracket[1], "monotone": res.monotone, "L_max": res.L_max}


def cmd_gw_mean(cfg, out):
    from .graph import level_tree
    from .percolation import (explore_interlacement_tree, explore_level_tree, first_supercritical_generation,
                              gw_analytic, gw_offspring_mean, growth_condition_mean, tree_level_connection,
                              write_estimates_csv, C_BAR)
    p = cfg.params
    spec = _spec(cfg)
    tree = level_tree(spec)
    gens = sorted(p["generations"])
    if p["N"] > 0:
        rep = gw_offspring_mean(spec, p["u"], gens, p["N"], cfg.seed)
        rows = zip(rep.generations, rep.analytic, rep.mc, rep.mc_se)
    else:
        rows = ((n, a, "", "") for n, a in zip(gens, gw_analytic(tree, p["u"], gens)))
    out.csv("gw.csv", ["generation", "analytic", "mc", "mc_se"], rows)
    summ = {"u": p["u"]}
    if spec.family == "geometric-tree":
        base, mean = growth_condition_mean(int(spec.get("d")), float(spec.get("alpha")))
        summ.update(growth_base=base, growth_condition_mean=mean, C_bar=C_BAR, growth_condition_holds=bool(base > C_BAR))
    ok = None
    if p["explore"] != "none":
        sg = p["start_generation"]
        n0 = first_supercritical_generation(tree, p["u"]) if sg == "auto" else _int(sg)
        if n0 is None:
            raise ValueError("no supercritical generation found for start_generation=auto")
        if p["explore"] == "level":
            ex = explore_level_tree(tree, p["h"], n0, p["explore_generations"], p["explore_N"], cfg.seed,
                                    p["budget"])
        elif p["explore"] == "interlacement":
            ex = explore_interlacement_tree(tree, p["u"], n0, p["explore_generations"], p["explore_N"], cfg.seed,
                                            p["budget"])
        else:
            raise ValueError("explore must be none, level or interlacement")
        out.json("explore.json", ex)
        summ.update(start_generation=n0, frequency=ex.frequency, budget_hits=ex.budget_hits)
        ok = _threshold_verdict(ex.frequency, p)
    if p["level_Ls"]:
        ests = tree_level_connection(tree, p["level_h"], p["level_Ls"], p["level_N"], cfg.seed)
        write_estimates_csv(out.path("level_connection.csv"), spec.family, ests, cfg.seed)
        vals = [e.estimate for e in ests]
        dec = all(b < a or b == 0 for a, b in zip(vals, vals[1:])) and vals[0] > vals[-1]
        summ.update(level_connection=vals, level_decays=bool(dec))
        ok = dec if ok is None else (ok and dec)
    return ok, summ


def _iso_inputs(cfg):
    g = _graph(cfg)
    return g, _harmonic(g, cfg.params)


def cmd_verify_iso(cfg, out):
    from .iso import run_coupled, verify_isomorphism
    p = cfg.params
    g, h = _iso_inputs(cfg)
    probes = None if p["probes"] is None else [_vid(g, q) for q in p["probes"]]
    run = run_coupled(g, p["us"], p["n_subs"], p["N"], cfg.seed, h, probes, want_caps=False, workers=cfg.workers)
    reps = {u: verify_isomorphism(g, u, p["n_subs"], p["N"], cfg.seed, h, probes, run=run) for u in run.us}
    out.json("iso.json", {str(u): r for u, r in reps.items()})
    ok = all(r.passed for r in reps.values())
    return ok, {"min_ks_p_adj": min(min(r.ks_p_adj) for r in reps.values()), "harmonic": h.name}


def cmd_verify_caplaw(cfg, out):
    from .iso import run_coupled, verify_cap_law
    p = cfg.params
    g, h = _iso_inputs(cfg)
    x0 = _vid(g, p["x0"])
    run = run_coupled(g, p["us"], p["n_subs"], p["N"], cfg.seed, h, [x0], x0=x0, workers=cfg.workers)
    rep = verify_cap_law(g, p["us"], x0, p["n_subs"], p["N"], cfg.seed, h, run=run, nsigma=p["nsigma"])
    out.json("caplaw.json", rep)
    nmax = rep.n_subs[-1]
    summ = {"harmonic": h.name}
    for u in rep.us:
        summ["u=%g" % u] = {"lhs": rep.lhs[("cable", nmax, u)], "rhs": rep.rhs[u],
                            "z": rep.extra["checks"][u]["cable_z"]}
    return rep.passed, summ


def cmd_verify_2d(cfg, out):
    from .iso import Z2_SETS, verify_2d, z2_emptiness
    p = cfg.params
    rep = verify_2d(p["radius"], p["us"], p["x0"], p["N"], cfg.seed, p["n_subs"], iso_u=p["iso_u"],
                    workers=cfg.workers)
    out.json("z2.json", rep)
    ok = rep.passed
    summ = {"iso_passed": rep.iso.passed, "window_emptiness_passed": rep.emptiness_passed,
            "caplaw_passed": rep.caplaw.passed}
    if p["emptiness_radius"] > 0:
        rows, eok = z2_emptiness(Z2_SETS[1:4], p["emptiness_radius"], p["emptiness_u"], p["emptiness_N"], cfg.seed)
        out.json("z2_emptiness.json", {"rows": rows, "passed": eok})
        summ["emptiness_passed"] = eok
        ok = ok and eok
    return ok, summ


def _read_manifests(paths, base):
    found = []
    for q in paths:
        q = q if os.path.isabs(q) else os.path.join(base, q)
        if os.path.isdir(q):
            for root, _, files in sorted(os.walk(q)):
                if "manifest.json" in files:
                    found.append(os.path.join(root, "manifest.json"))
        elif os.path.exists(q):
            found.append(q)
        else:
            raise ValueError("manifest %s not found" % q)
    if not found:
        raise ValueError("report needs at least one manifest")
    out = []
    for q in sorted(set(found), key=found.index):
        with open(q) as fh:
            out.append(RunManifest(**json.load(fh)))
    return out


def _flat(d, prefix=""):
    for k in sorted(d):
        v = d[k]
        if isinstance(v, dict):
            yield from _flat(v, prefix + k + ".")
        else:
            yield prefix + k, v


def emit_report(manifests, out: Outputs):
    """One summary row per manifest (CSV and text); returns the summary exit code."""
    if not manifests:
        raise ValueError("report needs at least one manifest")
    rows = []
    for m in manifests:
        g = m.config.get("graph", {})
        params = {k: v for k, v in m.config.get("params", {}).items() if v is not None}
        key = "; ".join("%s=%s" % (k, _fmt(v) if not isinstance(v, list) else v) for k, v in _flat(m.summary))
        rows.append([m.label or m.command, m.command, g.get("family", ""), m.config.get("seed", ""),
                     json.dumps(params, sort_keys=True), m.verdict, key])
    header = ["experiment", "command", "family", "seed", "parameters", "verdict", "key_numbers"]
    out.csv("summary.csv", header, rows)
    w = max(len(r[0]) for r in rows)
    with open(out.path("summary.txt"), "w") as fh:
        for r in rows:
            fh.write("%-*s  %-8s  %s\n" % (w, r[0], r[5], r[6]))
    code = EXIT_FAIL if any(m.verdict == "FAIL" for m in manifests) else EXIT_OK
    return code, rows


def cmd_report(cfg, out):
    ms = _read_manifests(cfg.params["manifests"], os.getcwd())
    code, rows = emit_report(ms, out)
    return code == EXIT_OK, {"runs": len(rows), "failed": sum(r[5] == "FAIL" for r in rows)}


HANDLERS = {"build-graph": cmd_build_graph, "green": cmd_green, "capacity": cmd_capacity,
            "kill-prob": cmd_kill_prob, "doob-check": cmd_doob_check, "sample-gff": cmd_sample_gff,
            "sample-soup": cmd_sample_soup, "connection": cmd_connection, "scan": cmd_scan,
            "gw-mean": cmd_gw_mean, "verify-iso": cmd_verify_iso, "verify-caplaw": cmd_verify_caplaw,
            "verify-2d": cmd_verify_2d, "report": cmd_report}


def run(cfg: ExperimentConfig) -> RunManifest:
    """Execute one configured operation and write its manifest."""
    out_dir = cfg.out_dir if os.path.isabs(cfg.out_dir) else os.path.join(os.getcwd(), cfg.out_dir)
    out = Outputs(out_dir)
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    t0 = time.perf_counter()
    ok, summary = HANDLERS[cfg.command](cfg, out)
    verdict = "COMPLETE" if ok is None else ("PASS" if ok else "FAIL")
    man = RunManifest(cfg.command, cfg.label, cfg.hash(), __version__, time.perf_counter() - t0, started,
                      list(out.files), verdict, _jsonable(summary), _jsonable(cfg.identity()))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(_jsonable(man.to_dict()), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return man


# -------------------------------------------------------------------- main
def _parser():
    ap = argparse.ArgumentParser(prog="cablegff", description="GFF and interlacement experiments on cable systems.")
    ap.add_argument("command", nargs="?", choices=COMMANDS, help="operation (or run.command in the config)")
    ap.add_argument("--config", help="INI config with [run], [graph], [params]")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out-dir")
    ap.add_argument("--graph", help="graph family (overrides graph.family)")
    ap.add_argument("--set", action="append", default=[], metavar="[SECTION.]KEY=VALUE",
                    help="override a config field; section defaults to params")
    ap.add_argument("--dry-run", action="store_true", help="print the resolved parameters and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.command, args.set, args.graph, args.seed, args.workers, args.out_dir)
    except ConfigError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_ERROR
    if args.dry_run:
        d = dict(cfg.identity(), out_dir=cfg.out_dir, label=cfg.label, config_hash=cfg.hash())
        print(json.dumps(_jsonable(d), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        man = run(cfg)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 1
        logger.debug("run failed", exc_info=True)
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_ERROR
    print("%s %s -> %s (%.1f s)" % (man.command, man.verdict, cfg.out_dir, man.wall_time))
    return EXIT_FAIL if man.verdict == "FAIL" else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
