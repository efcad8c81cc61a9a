"""
End-to-end runs: load or build a network, discretise, solve, compute
indicators and write VTK/CSV artifacts. Also parameter sweeps and the
command-line entry point.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .assembly import discretize
from .benchmarks import DFN3_EXACT, builtin_dfn3
from .generator import GeneratorParams, generate_network
from .indicators import (IndicatorReport, UndefinedIndicatorError, continuity_indicator,
                         errors_vs_exact, flux_mismatch, functional_value,
                         trace_mismatch)
from .meshing import MODES
from .optimizer import (ConfigError, ReducedProblem, SolveReport, estimate_scaling_factor,
                        pcg_solve, rescale_problem, solve_kkt_direct)

__all__ = ["RunConfig", "RunResult", "load_network", "run", "sweep", "main",
           "WORKERS_ENV", "choose_scaling"]

log = logging.getLogger("dfnopt")

WORKERS_ENV = "DFNOPT_WORKERS"


@dataclass
class RunConfig:
    network: str = "builtin:dfn3"
    dh: float = 0.02
    dl: float = 0.5
    dp: float = 0.3
    alpha: float = 1.0
    mode: str = "nonconforming"
    solver: str = "kkt"
    precond: str = "none"
    tol: float = 1e-6
    maxit: int | None = None
    scaling: str = "off"           # off | auto | a number
    seed: int = 0
    out: str | None = None
    # generator settings, used when network == "generator"
    gen_fractures: int = 20
    gen_extent: float = 1.0
    gen_size_min: float = 0.2
    gen_size_max: float = 0.4
    gen_logk_mean: float = -5.0
    gen_logk_var: float = 1.0 / 3.0
    gen_K: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("dl", "dp"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if not self.dh > 0:
            raise ConfigError("dh must be positive")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.solver not in ("kkt", "pcg"):
            raise ConfigError("solver must be kkt or pcg")
        if self.precond not in ("none", "pd", "pf"):
            raise ConfigError("precond must be none, pd or pf")
        s = str(self.scaling)
        if s not in ("off", "auto"):
            try:
                if not float(s) > 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"scaling must be off, auto or a positive number, got {s!r}") from None

    @classmethod
    def from_mapping(cls, m):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in m.items():
            if k not in fields:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v, fields[k].type)
        return cls(**kw)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, v, typ):
    if v is None or not isinstance(v, str):
        return v
    if v.lower() in ("none", ""):
        return None
    typ = str(typ)
    try:
        if typ.startswith("int"):
            return int(v)
        if typ.startswith("float"):
            return float(v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {v!r}") from None
    return v


@dataclass
class RunResult:
    config: RunConfig
    report: SolveReport
    indicators: IndicatorReport
    scaling: float
    w: np.ndarray = field(repr=False)
    heads: list = field(repr=False)
    files: list = field(default_factory=list)

    @property
    def converged(self):
        return self.report.converged


def load_network(cfg: RunConfig):
    """Network plus exact solution (or None) for a config's network source."""
    src = cfg.network
    if src == "builtin:dfn3":
        return builtin_dfn3()
    if src == "builtin:dfn10":
        text = resources.files("dfnopt").joinpath("data/dfn10.dfn").read_text()
        return io.parse_network(text, name="dfn10"), None
    if src == "generator":
        p = GeneratorParams(n_fractures=cfg.gen_fractures, extent=cfg.gen_extent,
                            size_range=(cfg.gen_size_min, cfg.gen_size_max),
                            log10K_mean=cfg.gen_logk_mean, log10K_var=cfg.gen_logk_var,
                            constant_K=cfg.gen_K, seed=cfg.seed)
        return generate_network(p), None
    path = src[5:] if src.startswith("file:") else src
    net = io.read_network(path)
    exact = DFN3_EXACT if net.name == "dfn3" else None
    return net, exact


def choose_scaling(cfg: RunConfig, network):
    s = str(cfg.scaling)
    if s == "off":
        return 1.0
    if s != "auto":
        return float(s)
    heads = [float(bc.value) for f in network.fractures for bc in f.edge_bcs
             if bc.kind == "dirichlet" and not callable(bc.value)]
    drop = (max(heads) - min(heads)) if heads else 0.0
    drop = drop if drop > 0 else 1.0
    K = 10.0 ** np.mean([np.log10(np.sqrt(np.linalg.det(f.transmissivity))) for f in network.fractures])
    return estimate_scaling_factor(drop, network.diameter, K)


def _kkt_report(gs, sol, problem):
    rep = SolveReport("kkt")
    worst = max(sol.residuals.values())
    rep.converged = bool(np.isfinite(worst) and worst <= 1e-8)
    r = problem.residual(sol.w)
    rep.residual_history = [float(np.linalg.norm(r))]
    rep.notes.append(f"block residuals {sol.residuals}")
    return rep


def run(cfg: RunConfig, network=None, exact=None) -> RunResult:
    """Solve one configuration; writes artifacts when ``cfg.out`` is set."""
    cfg.validate()
    if network is None:
        network, exact = load_network(cfg)
    K = choose_scaling(cfg, network)
    if K != 1.0:
        log.info("scaling factor %.3g", K)
    net = rescale_problem(network, K) if K != 1.0 else network
    gs = discretize(net, cfg.dh, cfg.dl, cfg.dp, cfg.alpha, cfg.mode)
    problem = ReducedProblem(gs)
    if cfg.solver == "kkt":
        sol = solve_kkt_direct(gs)
        w = sol.w
        report = _kkt_report(gs, sol, problem)
    else:
        state, report = pcg_solve(problem, cfg.precond, cfg.tol, cfg.maxit)
        w = state.w
    report.scaling = K
    report.functional_value = problem.functional(w)
    heads = gs.full_heads(problem.head(w))

    ind = IndicatorReport()
    ind.delta_S_h, ind.h_max, ind.l_tot = continuity_indicator(gs, heads)
    ind.J_value = functional_value(gs, w, heads)
    ind.J_mismatch = trace_mismatch(gs, heads, w)
    if cfg.alpha != 1.0:
        log.info("alpha != 1: functional %.6g, plain trace mismatch %.6g",
                 ind.J_value, ind.J_mismatch)
    try:
        ind.delta_inout, ind.phi_in, ind.phi_out = flux_mismatch(gs, heads, w)
        ind.phi_in /= K
        ind.phi_out /= K
    except UndefinedIndicatorError as exc:
        log.info("flux mismatch not available: %s", exc)
    if exact is not None:
        w_phys = w.copy()
        w_phys[:gs.n_lambda] /= K
        ind.E_h_L2, ind.E_h_H1, ind.E_lambda_L2 = errors_vs_exact(gs, heads, w_phys, exact)

    result = RunResult(cfg, report, ind, K, w, heads)
    if cfg.out:
        result.files = _write_outputs(Path(cfg.out), net, gs, result)
    return result


def _write_outputs(out: Path, net, gs, res: RunResult):
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for loc, h in zip(gs.locals, res.heads):
        p = out / f"fracture_{loc.fracture_id:04d}.vtk"
        io.write_vtk(p, net.fractures[loc.fracture_id], loc.mesh, h)
        files.append(p)
    vtm = out / "heads.vtm"
    io.write_vtm(vtm, files)
    rh = res.report.residual_history
    jh = res.report.functional_history or [float("nan")] * len(rh)
    hist = out / "residuals.csv"
    io.write_csv(hist, ["iteration", "residual_norm", "functional"],
                 [(k, float(r), float(j)) for k, (r, j) in enumerate(zip(rh, jh))])
    ind = out / "indicators.csv"
    d = res.indicators.as_dict()
    io.write_csv(ind, ["solver", "precond", "iterations", "converged", "scaling"] + list(d),
                 [[res.report.solver, res.report.preconditioner, res.report.iterations,
                   int(res.report.converged), float(res.scaling)] + [float(v) for v in d.values()]])
    return files + [vtm, hist, ind]


SWEEP_COLUMNS = ["iterations", "converged", "delta_S_h", "delta_inout", "E_h_L2",
                 "E_h_H1", "E_lambda_L2", "J_value", "J_mismatch"]


def _sweep_cell(args):
    cfg, overrides = args
    try:
        r = run(dataclasses.replace(cfg, **overrides))
        d = r.indicators.as_dict()
        return [r.report.iterations, int(r.converged)] + [d[k] for k in SWEEP_COLUMNS[2:]]
    except Exception as exc:  # recorded, the sweep carries on
        log.warning("sweep cell failed: %s", exc)
        return [float("nan")] * len(SWEEP_COLUMNS)


def sweep(cfg: RunConfig, grid: dict, path=None, workers=None):
    """Run the Cartesian product of ``grid`` (name -> values) and tabulate indicators.

    Returns ``(header, rows)``; failed cells become NaN rows. The worker
    count defaults to the ``DFNOPT_WORKERS`` environment variable.
    """
    names = list(grid)
    combos = list(itertools.product(*(grid[n] for n in names)))
    base = dataclasses.replace(cfg, out=None)
    cfgs = [(base, dict(zip(names, c))) for c in combos]
    workers = int(os.environ.get(WORKERS_ENV, "1")) if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_cell, cfgs))
    else:
        results = [_sweep_cell(c) for c in cfgs]
    header = names + SWEEP_COLUMNS
    rows = [list(c) + r for c, r in zip(combos, results)]
    if path is not None:
        io.write_csv(path, header, rows)
    return header, rows


def _parser():
    p = argparse.ArgumentParser(prog="dfnopt", description="DFN flow by PDE-constrained optimisation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--network")
        s.add_argument("--dh", type=float)
        s.add_argument("--dl", type=float)
        s.add_argument("--dp", type=float)
        s.add_argument("--alpha", type=float)
        s.add_argument("--solver", choices=["kkt", "pcg"])
        s.add_argument("--precond", choices=["none", "pd", "pf"])
        s.add_argument("--tol", type=float)
        s.add_argument("--maxit", type=int)
        s.add_argument("--scaling")
        s.add_argument("--mode", choices=list(MODES))
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            s.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                           help="parameter axis; repeat for a product grid")
            s.add_argument("--csv", default="sweep.csv")
    return p


def _config_from_args(args):
    m = io.read_config(args.config) if args.config else {}
    for k in ("network", "dh", "dl", "dp", "alpha", "solver", "precond", "tol", "maxit",
              "scaling", "mode", "seed", "out"):
        v = getattr(args, k)
        if v is not None:
            m[k] = v
    return RunConfig.from_mapping(m)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "run":
            res = run(cfg)
            r, ind = res.report, res.indicators
            print(f"solver={r.solver} precond={r.preconditioner} iterations={r.iterations} "
                  f"converged={r.converged} scaling={res.scaling:g}")
            for k, v in ind.as_dict().items():
                print(f"{k} = {v:.6g}")
            return 0 if res.converged else 1
        grid = {}
        for g in args.grid:
            if "=" not in g:
                raise ConfigError(f"bad --grid {g!r}; expected KEY=V1,V2")
            k, vals = g.split("=", 1)
            if k not in _FIELDS:
                raise ConfigError(f"unknown sweep key {k!r}")
            grid[k] = [_coerce(k, v, _FIELDS[k].type) for v in vals.split(",")]
        header, rows = sweep(cfg, grid, args.csv)
        print(f"wrote {len(rows)} rows to {args.csv}")
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
