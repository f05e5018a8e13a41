"""Batch experiment driver.

Usage::

    python -m artifact <command> [--config=path.json] [--key=value ...]

Values are parsed as JSON when possible (``--sizes=[100,200]``,
``--p=[0.5,0.3,0.2]``), comma lists become lists (``--sizes=100,200``), and
anything else is kept as a string.  Every run writes CSV tables and a
``manifest.json`` into ``output_dir``.

Exit status: 0 on success, 2 on an invalid configuration, 3 when a numeric
check or sub-task fails (details in the manifest and on stderr).
"""
from __future__ import annotations

import json
import os
import platform
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import anisotropic as an
from .eigen import adjacency_eigensystem
from .graphs import (
    build_named,
    geometry_profile,
    random_labelled_regular,
    random_regular,
    save_graph,
)
from .io import config_hash, write_csv, write_json
from .kernels import (
    PathComplex,
    PathSpaceKernel,
    constant_Ck,
    diagonal_kernel,
    flow_average,
    flow_average_lemma_bound,
    operator_selftest,
    shell_constant_kernel,
    verify_inverse_bound,
)
from .nonbacktracking import nb_spectrum_correspondence
from .tree import green_tree, km_density
from .variance import (
    balanced_sign_observable,
    decay_experiment,
    km_compare,
    loglog_slope,
    nb_variance,
)

COMMANDS = (
    "generate",
    "geometry",
    "spectrum",
    "km-compare",
    "nb-spectrum",
    "operators-selftest",
    "variance",
    "nb-variance",
    "flow-average",
    "anis-green",
    "anis-density",
    "anis-cylinders",
    "anis-variance",
    "transfer-decay",
)

OBSERVABLES = ("sign", "random", "random0", "shell", "mixed")

DEFAULT_TOLERANCES = {
    "km_distance": 0.05,
    "nb_pairing": 1e-8,
    "selftest": 1e-12,
    "green_residual": 1e-10,
    "kolmogorov": 1e-8,
    "cylinder_consistency": 1e-10,
    "transfer_gap": 1e-3,
    "stochastic": 1e-8,
}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NumericFailure(RuntimeError):
    """A numeric check failed inside a task."""


@dataclass
class ExperimentConfig:
    command: str
    q: int = 2
    sizes: list = field(default_factory=lambda: [100, 200, 400, 800])
    seeds: list = field(default_factory=lambda: [1])
    p: list | None = None
    observable: dict = field(default_factory=lambda: {"kind": "sign", "k": 0, "seed": 11})
    lambda_grid: object = field(default_factory=lambda: {"start": -0.95, "stop": 0.95, "num": 39})
    output_dir: str = "out"
    tolerances: dict = field(default_factory=dict)
    graph: str | None = None
    labelled: bool = False
    centering: str = "none"
    imag: float = 0.0
    T: list = field(default_factory=lambda: [10, 20, 40])
    shell_cap: int = 12
    m: list = field(default_factory=lambda: [1, 2])
    depth: int = 3
    interval: list | None = None
    jobs: int | None = None

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_sources(cls, command, config_path=None, overrides=None):
        data = {}
        if config_path is not None:
            try:
                with open(config_path) as fh:
                    data = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError("config", f"cannot read {config_path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config", "top level must be a JSON object")
        data.update(overrides or {})
        data["command"] = command
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}")
        for name in ("sizes", "seeds"):
            if isinstance(getattr(self, name), int) and not isinstance(getattr(self, name), bool):
                setattr(self, name, [getattr(self, name)])
        if not isinstance(self.q, int) or self.q < 2:
            raise ConfigError("q", "must be an integer >= 2")
        if not isinstance(self.sizes, list) or not self.sizes:
            raise ConfigError("sizes", "must be a nonempty list")
        if not all(isinstance(n, int) and n > 0 for n in self.sizes):
            raise ConfigError("sizes", "entries must be positive integers")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError("sizes", "must be strictly ascending")
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ConfigError("seeds", "must be a nonempty list")
        if not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds", "entries must be integers")
        if self.p is not None:
            try:
                p = np.asarray(self.p, dtype=float)
            except (TypeError, ValueError) as exc:
                raise ConfigError("p", "must be a list of numbers") from exc
            if p.ndim != 1 or len(p) != self.q + 1:
                raise ConfigError("p", f"needs q+1 = {self.q + 1} weights")
            if np.any(p <= 0):
                raise ConfigError("p", "weights must be positive")
            if abs(p.sum() - 1) > 1e-12:
                raise ConfigError("p", f"weights must sum to 1 (got {p.sum():.17g})")
        if self.command.startswith("anis") or self.command == "transfer-decay":
            if self.p is None:
                raise ConfigError("p", "required for anisotropic commands")
        obs = self.observable
        if not isinstance(obs, dict) or obs.get("kind") not in OBSERVABLES:
            raise ConfigError("observable", f"kind must be one of {', '.join(OBSERVABLES)}")
        if not isinstance(obs.get("k", 0), int) or obs.get("k", 0) < 0:
            raise ConfigError("observable", "k must be a non-negative integer")
        if self.centering not in ("none", "spherical"):
            raise ConfigError("centering", "must be 'none' or 'spherical'")
        for key in self.tolerances:
            if key not in DEFAULT_TOLERANCES:
                raise ConfigError("tolerances", f"unknown tolerance {key!r}")
        if self.graph is not None:
            try:
                build_named(self.graph)
            except ValueError as exc:
                raise ConfigError("graph", str(exc)) from exc
        if self.jobs is not None and (not isinstance(self.jobs, int) or self.jobs < 1):
            raise ConfigError("jobs", "must be a positive integer")
        if self.interval is not None and (len(self.interval) != 2 or self.interval[0] >= self.interval[1]):
            raise ConfigError("interval", "must be [lo, hi] with lo < hi")
        try:
            self.lambdas()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError("lambda_grid", "must be a list or {start, stop, num}") from exc

    # -- accessors ------------------------------------------------------------

    def tol(self, key):
        return float(self.tolerances.get(key, DEFAULT_TOLERANCES[key]))

    def lambdas(self):
        grid = self.lambda_grid
        if isinstance(grid, dict):
            return np.linspace(float(grid["start"]), float(grid["stop"]), int(grid["num"]))
        return np.asarray(grid, dtype=float)

    def workers(self):
        return self.jobs or os.cpu_count() or 1


# ----------------------------------------------------------------------------
# helpers


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(t) for t in text.split(",")]
    return text


def parse_args(argv):
    """``(command, config_path, overrides)`` from ``--key=value`` arguments."""
    if not argv or argv[0] in ("-h", "--help"):
        raise ConfigError("command", f"usage: artifact <command> [--key=value ...]; commands: {', '.join(COMMANDS)}")
    command, rest = argv[0], argv[1:]
    config_path, overrides = None, {}
    for arg in rest:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(arg, "flags use the --key=value form")
        key, value = arg[2:].split("=", 1)
        key = key.replace("-", "_")
        if key == "config":
            config_path = value
        else:
            overrides[key] = _parse_value(value)
    return command, config_path, overrides


def _git_describe():
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None


def _pmap(cfg, fn, items):
    """Ordered parallel map; results are collected by index so order never changes."""
    items = list(items)
    if cfg.workers() == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.workers()) as pool:
        return list(pool.map(fn, items))


def _single_graph(cfg):
    if cfg.graph is not None:
        g = build_named(cfg.graph)
        return g, g.bonds, cfg.graph
    n, seed = cfg.sizes[0], cfg.seeds[0]
    if cfg.labelled or cfg.p is not None:
        g, bonds = random_labelled_regular(n, cfg.q, seed)
    else:
        g = random_regular(n, cfg.q + 1, seed)
        bonds = g.bonds
    return g, bonds, f"random(n={n},seed={seed})"


def make_observable(spec, g, space, eig=None):
    """Kernel described by ``{"kind", "k", "seed"}``.

    ``sign``: balanced +-1 vertex function; ``random``: +-1 on ``H_k``;
    ``random0``: the same with mean removed; ``shell``: ``1_k``;
    ``mixed``: ``1_k + 0.5 * random``.
    """
    kind, k, seed = spec["kind"], int(spec.get("k", 0)), int(spec.get("seed", 0))
    if kind == "sign":
        return diagonal_kernel(space, balanced_sign_observable(g.n, seed))
    if kind == "shell":
        return shell_constant_kernel(space, [0.0] * k + [1.0])
    rng = np.random.default_rng(seed)
    vals = np.sign(rng.standard_normal(space.size(k))) + 0j
    K = PathSpaceKernel(space, k, vals)
    if kind == "random0":
        return K.centered()
    if kind == "mixed":
        return shell_constant_kernel(space, [0.0] * k + [1.0]) + 0.5 * K
    return K


# ----------------------------------------------------------------------------
# fail-fast invariant suites


def _check(ok, message):
    if not ok:
        raise NumericFailure(message)


def _preflight_graphs(cfg):
    g = build_named("petersen")
    g.bonds.check()
    _check(geometry_profile(g).girth == 5, "petersen girth is not 5")


def _preflight_spectrum(cfg):
    g = build_named("petersen")
    eig = adjacency_eigensystem(g)
    _check(eig.residual(g.dense_adjacency()) < 1e-10, "eigensolver residual on petersen")


def _preflight_operators(cfg):
    res = operator_selftest(build_named("petersen"), seed=0)
    _check(max(res.values()) < 1e-12, f"operator identities on petersen: {res}")


def _preflight_tree(cfg):
    dens = km_density(cfg.q)
    _check(abs(dens.cdf(dens.edge) - 1) < 1e-8, "Kesten-McKay mass is not 1")
    val = green_tree(cfg.q, 10.0, 0)
    _check(abs(val.imag) < 1e-14 and val.real > 0, "tree Green function off the real axis")


def _preflight_anis(cfg):
    st = an.solve_green(cfg.p, 0.2 + 0.05j)
    _check(st.max_residual < 1e-10 and st.branch_ok, "Green system residual or branch")


PREFLIGHT = {
    "generate": [_preflight_graphs],
    "geometry": [_preflight_graphs],
    "spectrum": [_preflight_spectrum],
    "km-compare": [_preflight_spectrum, _preflight_tree],
    "nb-spectrum": [_preflight_spectrum],
    "operators-selftest": [_preflight_graphs],
    "variance": [_preflight_spectrum, _preflight_operators],
    "nb-variance": [_preflight_spectrum, _preflight_operators],
    "flow-average": [_preflight_operators],
    "anis-green": [_preflight_anis],
    "anis-density": [_preflight_anis],
    "anis-cylinders": [_preflight_anis],
    "anis-variance": [_preflight_anis, _preflight_operators],
    "transfer-decay": [_preflight_anis],
}


# ----------------------------------------------------------------------------
# commands: each returns a list of (task name, ok, message) and writes its tables


def cmd_generate(cfg, out):
    rows, tasks = [], []

    def build(item):
        n, seed = item
        if cfg.labelled:
            g, bonds = random_labelled_regular(n, cfg.q, seed)
        else:
            g = random_regular(n, cfg.q + 1, seed)
            bonds = None
        return n, seed, g, bonds

    for n, seed, g, bonds in _pmap(cfg, build, [(n, s) for n in cfg.sizes for s in cfg.seeds]):
        path = out / "graphs" / f"graph_n{n}_s{seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_graph(path, g, bonds)
        rows.append((n, seed, cfg.q, len(g.edges), bool(cfg.labelled), path.name))
        tasks.append((f"generate n={n} seed={seed}", True, ""))
    write_csv(out / "graphs.csv", ("n", "seed", "q", "edges", "labelled", "file"), rows)
    return tasks


def _graph_items(cfg):
    if cfg.graph is not None:
        g = build_named(cfg.graph)
        return [(cfg.graph, None, g)]
    return [(n, s, random_regular(n, cfg.q + 1, s)) for n in cfg.sizes for s in cfg.seeds]


def cmd_geometry(cfg, out):
    rows = []
    for n, seed, g in _graph_items(cfg):
        prof = geometry_profile(g)
        rows.append((n, seed, prof.girth, prof.min_rho, *(prof.bad_count(r) for r in (1, 2, 3, 4))))
    write_csv(out / "geometry.csv", ("n", "seed", "girth", "min_rho", "bad_1", "bad_2", "bad_3", "bad_4"), rows)
    return [("geometry", True, "")]


def cmd_spectrum(cfg, out):
    rows, summary = [], []
    items = _graph_items(cfg)
    eigs = _pmap(cfg, lambda it: adjacency_eigensystem(it[2]), items)
    for (n, seed, g), eig in zip(items, eigs):
        rows.extend((n, seed, j, lam) for j, lam in enumerate(eig.lambdas))
        summary.append((n, seed, eig.beta, eig.residual(g.dense_adjacency())))
    write_csv(out / "spectrum.csv", ("n", "seed", "index", "lambda"), rows)
    write_csv(out / "spectrum_summary.csv", ("n", "seed", "beta", "residual"), summary)
    return [("spectrum", True, "")]


def cmd_km_compare(cfg, out):
    tol = cfg.tol("km_distance")
    items = [(n, s) for n in cfg.sizes for s in cfg.seeds]

    def run(item):
        n, seed = item
        g = random_regular(n, cfg.q + 1, seed)
        return adjacency_eigensystem(g).lambdas

    spectra = _pmap(cfg, run, items)
    dens = km_density(cfg.q)
    edges = np.linspace(-dens.edge, dens.edge, 41)
    hist_rows, rows, tasks = [], [], []
    for (n, seed), lam in zip(items, spectra):
        rep = km_compare(cfg.q, lam)
        nontrivial = lam[np.abs(lam - (cfg.q + 1)) > 1e-8]
        counts, _ = np.histogram(nontrivial, bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            hist_rows.append((n, seed, lo, hi, c / len(nontrivial), dens.cdf(hi) - dens.cdf(lo)))
        rows.append((n, seed, rep.n, rep.distance, rep.at))
        ok = rep.distance < tol
        tasks.append((f"km n={n} seed={seed}", ok, "" if ok else f"distance {rep.distance:.4g} >= {tol}"))
    write_csv(out / "km_histogram.csv", ("n", "seed", "bin_lo", "bin_hi", "empirical", "kesten_mckay"), hist_rows)
    write_csv(out / "km_compare.csv", ("n", "seed", "count", "sup_cdf_distance", "at"), rows)
    return tasks


def cmd_nb_spectrum(cfg, out):
    tol = cfg.tol("nb_pairing")
    g, _, name = _single_graph(cfg)
    eig = adjacency_eigensystem(g)
    try:
        rep = nb_spectrum_correspondence(g, eig, tol=max(tol, 1e-6))
    except ValueError as exc:
        return [(f"nb-spectrum {name}", False, str(exc))]
    write_csv(
        out / "nb_pairing.csv",
        ("predicted_re", "predicted_im", "computed_re", "computed_im", "error", "family"),
        rep.rows(),
    )
    ok = rep.max_error < tol
    return [(f"nb-spectrum {name}", ok, f"max pairing error {rep.max_error:.3g}")]


def cmd_operators_selftest(cfg, out):
    tol = cfg.tol("selftest")
    graphs = [("petersen", build_named("petersen")), ("heawood", build_named("heawood"))]
    graphs += [(f"random(n={n},seed={s})", random_regular(n, cfg.q + 1, s)) for n in cfg.sizes for s in cfg.seeds]
    rows, tasks = [], []
    for name, g in graphs:
        t0 = time.perf_counter()
        res = operator_selftest(g, seed=0)
        wall = time.perf_counter() - t0
        for key, val in res.items():
            rows.append((name, key, val, wall))
        worst = max(res.values())
        tasks.append((f"selftest {name}", worst < tol, f"max residual {worst:.3g}"))
    write_csv(out / "operators_selftest.csv", ("graph", "identity", "residual", "wall_s"), rows)
    return tasks


def _isotropic_family(cfg, seed):
    def build(n):
        g = random_regular(n, cfg.q + 1, seed)
        return g, adjacency_eigensystem(g)

    return _pmap(cfg, build, cfg.sizes)


def _decay_tables(cfg, out, name, run_seed):
    rows, per_seed = [], []
    for seed in cfg.seeds:
        table = run_seed(seed)
        per_seed.append(table.vars)
        for r in table.rows:
            rows.append((r[0], seed, *r[2:], table.slope))
    header = ("n", "seed", "girth", "beta", "var", "hsn_sq", "bad_term", "slope")
    write_csv(out / f"{name}.csv", header, rows)
    med = np.median(np.array(per_seed), axis=0)
    slope = loglog_slope(cfg.sizes, med)
    write_csv(
        out / f"{name}_median.csv",
        ("n", "median_var", "slope"),
        [(n, v, slope) for n, v in zip(cfg.sizes, med)],
    )
    return med, slope


def cmd_variance(cfg, out):
    def run_seed(seed):
        family = _isotropic_family(cfg, seed)
        gen = lambda g, space, eig: make_observable(cfg.observable, g, space, eig)
        return decay_experiment(family, gen, cfg.centering, seeds=[seed] * len(family))

    if len(cfg.sizes) < 3:
        raise ConfigError("sizes", "a decay experiment needs at least three sizes")
    med, slope = _decay_tables(cfg, out, "variance", run_seed)
    return [("variance", bool(np.all(np.isfinite(med))), f"median slope {slope:.4g}")]


def cmd_nb_variance(cfg, out):
    g, _, name = _single_graph(cfg)
    eig = adjacency_eigensystem(g)
    space = PathComplex(g)
    K = make_observable(cfg.observable, g, space, eig)
    if isinstance(K, PathSpaceKernel) and K.k == 0:
        raise ConfigError("observable", "nb-variance needs k >= 1")
    try:
        rep = nb_variance(g, eig, K, interval=cfg.interval)
    except ValueError as exc:
        return [(f"nb-variance {name}", False, str(exc))]
    rows = [(j, lam, d.real, d.imag) for j, (lam, d) in enumerate(zip(rep.lambdas, rep.diag))]
    write_csv(out / "nb_variance_terms.csv", ("index", "lambda", "pairing_re", "pairing_im"), rows)
    write_csv(out / "nb_variance.csv", ("graph", "var_nb", "norm_sq"), [(name, rep.var, K.norm_sq())])
    return [(f"nb-variance {name}", True, f"var {rep.var:.6g}")]


def cmd_flow_average(cfg, out):
    g, _, name = _single_graph(cfg)
    eig = adjacency_eigensystem(g)
    space = PathComplex(g)
    k = max(1, int(cfg.observable.get("k", 1)))
    K = make_observable({"kind": "random0", "k": k, "seed": cfg.observable.get("seed", 0)}, g, space)
    c = constant_Ck(k, eig.beta, g.q)
    rows, tasks = [], []
    for T in cfg.T:
        rep = flow_average(K, float(T), cfg.shell_cap)
        lemma = flow_average_lemma_bound(c, T) * K.norm()
        ok = rep.norm_estimate <= rep.norm_bound + 1e-12 and rep.norm_bound <= lemma
        rows.append((T, K.norm(), rep.norm_estimate, rep.norm_bound, lemma, rep.steps))
        tasks.append((f"flow-average T={T}", ok, "" if ok else "bound violated"))
    inv = [verify_inverse_bound(g, kk, eig.beta, space) for kk in (1, 2)]
    write_csv(out / "flow_average.csv", ("T", "norm_K", "norm_estimate", "norm_bound", "lemma_bound", "krylov_steps"), rows)
    write_csv(
        out / "inverse_bound.csv",
        ("k", "beta", "beta_prime", "measured", "constant"),
        [(r.k, r.beta, r.beta_prime, r.measured, r.constant) for r in inv],
    )
    tasks += [(f"inverse bound k={r.k}", r.holds, f"{r.measured:.4g} <= {r.constant:.4g}") for r in inv]
    return tasks


def _states(cfg, lams):
    side = None if cfg.imag else "+"
    gam = lams + 1j * cfg.imag if cfg.imag else lams
    return [an.solve_green(cfg.p, g, side=side) for g in gam]


def cmd_anis_green(cfg, out):
    tol = cfg.tol("green_residual")
    lams = cfg.lambdas()
    rows, tasks, dump = [], [], []
    for lam, st in zip(lams, _states(cfg, lams)):
        z = st.zeta
        rows.append(
            (lam, st.gamma.imag, st.w.real, st.w.imag, *np.ravel(np.column_stack([z.real, z.imag])), st.max_residual, st.branch_ok)
        )
        dump.append(st.to_dict())
        if st.side is not None and abs(st.diagonal) < 1e-8:
            # G(o,o) vanishes inside a gap: some zeta_j is infinite and the system degenerates
            tasks.append((f"green lam={lam:.6g}", True, "G(o,o) = 0 in a spectral gap, degenerate point"))
            continue
        ok = st.branch_ok and st.max_residual < tol
        tasks.append((f"green lam={lam:.6g}", ok, f"residual {st.max_residual:.3g}"))
    zcols = [f"zeta{j + 1}_{part}" for j in range(cfg.q + 1) for part in ("re", "im")]
    write_csv(out / "anis_green.csv", ("lambda", "eps", "w_re", "w_im", *zcols, "residual", "branch_ok"), rows)
    write_json(out / "anis_green.json", dump)
    return tasks


def cmd_anis_density(cfg, out):
    tab = an.anis_density(cfg.p, cfg.lambdas())
    write_csv(out / "anis_density.csv", ("lambda", "density", "spread", "flagged"), tab.rows())
    mass = an.density_mass(cfg.p)
    ivals = an.support_intervals(cfg.p)
    write_csv(out / "anis_support.csv", ("lo", "hi"), ivals)
    write_csv(out / "anis_mass.csv", ("mass", "deficit"), [(mass, 1 - mass)])
    ok = bool(np.all(tab.density >= 0)) and mass <= 1 + 1e-6
    return [("anis-density", ok, f"mass {mass:.12g}, {int(tab.flagged.sum())} flagged points")]


def cmd_anis_cylinders(cfg, out):
    tk, tc = cfg.tol("kolmogorov"), cfg.tol("cylinder_consistency")
    rows, tasks = [], []
    for lam, st in zip(cfg.lambdas(), _states(cfg, cfg.lambdas())):
        if st.density <= 1e-8:
            tasks.append((f"cylinders lam={lam:.6g}", True, "density zero, skipped"))
            continue
        cyl = an.harmonic_cylinders(st, cfg.depth)
        for word, val in cyl.weights.items():
            rows.append((lam, "".join(map(str, word)), val))
        ksum = an.kolmogorov_sum(st)
        cons = cyl.consistency_error()
        ok = abs(ksum - 1) < tk and cons < tc
        tasks.append((f"cylinders lam={lam:.6g}", ok, f"kolmogorov {ksum - 1:.3g}, consistency {cons:.3g}"))
    write_csv(out / "anis_cylinders.csv", ("lambda", "word", "weight"), rows)
    return tasks


def cmd_anis_variance(cfg, out):
    if len(cfg.sizes) < 3:
        raise ConfigError("sizes", "a decay experiment needs at least three sizes")

    def run_seed(seed):
        family = _pmap(cfg, lambda n: random_labelled_regular(n, cfg.q, seed), cfg.sizes)
        gen = lambda g, space, eig: make_observable(cfg.observable, g, space, eig)
        return an.anis_variance_experiment(family, cfg.p, gen, use_centering=cfg.centering != "none")

    med, slope = _decay_tables(cfg, out, "anis_variance", run_seed)
    return [("anis-variance", bool(np.all(np.isfinite(med))), f"median slope {slope:.4g}")]


def cmd_transfer_decay(cfg, out):
    gap_tol, stoch = cfg.tol("transfer_gap"), cfg.tol("stochastic")
    n, seed = cfg.sizes[0], cfg.seeds[0]
    g, bonds = random_labelled_regular(n, cfg.q, seed)
    space = PathComplex(g, bonds)
    rows, tasks = [], []
    for lam, st in zip(cfg.lambdas(), _states(cfg, cfg.lambdas())):
        if st.density <= 1e-8:
            tasks.append((f"transfer E0={lam:.6g}", True, "density zero, skipped"))
            continue
        for m in cfg.m:
            op = an.weighted_transfer(st, space, m)
            twisted = an.weighted_transfer(st, space, m, with_u=True)
            norm_s = op.norm(1)
            norm_u = twisted.norm(m + 1)
            rows.append((lam, m, norm_s, norm_u, 1 - norm_u, op.invariance_error()))
            ok = abs(norm_s - 1) < stoch and norm_u <= 1 - gap_tol
            tasks.append((f"transfer E0={lam:.6g} m={m}", ok, f"||S||={norm_s:.12g}, ||(S^u)^(m+1)||={norm_u:.6g}"))
    write_csv(out / "transfer_decay.csv", ("E0", "m", "norm_S", "norm_Su_power", "delta", "invariance_error"), rows)
    return tasks


HANDLERS = {
    "generate": cmd_generate,
    "geometry": cmd_geometry,
    "spectrum": cmd_spectrum,
    "km-compare": cmd_km_compare,
    "nb-spectrum": cmd_nb_spectrum,
    "operators-selftest": cmd_operators_selftest,
    "variance": cmd_variance,
    "nb-variance": cmd_nb_variance,
    "flow-average": cmd_flow_average,
    "anis-green": cmd_anis_green,
    "anis-density": cmd_anis_density,
    "anis-cylinders": cmd_anis_cylinders,
    "anis-variance": cmd_anis_variance,
    "transfer-decay": cmd_transfer_decay,
}


# ----------------------------------------------------------------------------
# orchestration


def run(cfg: ExperimentConfig):
    """Run one command; returns ``(exit status, manifest dict)``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": asdict(cfg),
        "config_hash": config_hash(asdict(cfg)),
        "seed": cfg.seeds,
        "git_describe": _git_describe(),
        "versions": {
            "artifact": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    t0 = time.perf_counter()
    status = EXIT_OK
    tasks = []
    try:
        for check in PREFLIGHT[cfg.command]:
            check(cfg)
        raw = HANDLERS[cfg.command](cfg, out)
        tasks = [{"task": name, "ok": bool(ok), "message": msg} for name, ok, msg in raw]
        if not all(t["ok"] for t in tasks):
            status = EXIT_NUMERIC
    except ConfigError:
        raise
    except (NumericFailure, an.GreenSolveError, ArithmeticError, np.linalg.LinAlgError) as exc:
        tasks.append({"task": "preflight/numerics", "ok": False, "message": f"{type(exc).__name__}: {exc}"})
        status = EXIT_NUMERIC
    manifest["tasks"] = tasks
    manifest["status"] = status
    manifest["elapsed_s"] = time.perf_counter() - t0
    write_json(out / "manifest.json", manifest)
    return status, manifest


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, config_path, overrides = parse_args(argv)
        cfg = ExperimentConfig.from_sources(command, config_path, overrides)
        status, manifest = run(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for t in manifest["tasks"]:
        mark = "ok" if t["ok"] else "FAIL"
        stream = sys.stdout if t["ok"] else sys.stderr
        print(f"[{mark}] {t['task']} {t['message']}".rstrip(), file=stream)
    return status


__all__ = ["ExperimentConfig", "ConfigError", "run", "main", "parse_args", "make_observable", "COMMANDS"]
