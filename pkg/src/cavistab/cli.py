"""Command-line front end: one TOML config file fully specifies a run.

Commands: mesh | solve | cube-bench | sweep | piola-verify | mazya |
check-atlas. All tabular outputs are CSV with a version header line; runs are
deterministic for a fixed config (timestamps only in the log, never in CSVs).
Exit codes: 2 config/geometry, 3 mesh, 4 solver/numerics, 5 io.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import errors as err
from .atlas import ProfileFunction, oscillating_box_family
from .eigensolver import classify_modes, solve_gevp
from .fem import assemble_mass, assemble_stiffness, build_space
from .gaffney import ModulusOfContinuity, mazya_criterion
from .harness import MeshPolicy, SolverConfig, cube_benchmark, sweep_epsilon
from .mesh import mesh_box, mesh_quality, policy_resolution, shear_fit, \
    write_mesh_text
from .piola import make_box_test_fields, piola_map_for_family, verify_piolamain

log = logging.getLogger("cavistab")

COMMANDS = ("mesh", "solve", "cube-bench", "sweep", "piola-verify", "mazya",
            "check-atlas")

EXIT_CODES = {
    "config": 2,
    "mesh": 3,
    "solver": 4,
    "io": 5,
}

# every package error class resolves to exactly one documented exit code
ERROR_EXIT = {
    err.ConfigError: "config",
    err.GeometryError: "config",
    err.PiolaError: "config",
    err.MeshError: "mesh",
    err.SolverError: "solver",
    err.QuadratureError: "solver",
    err.PointLocationError: "solver",
    err.FemError: "solver",
    err.CavistabError: "config",
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, OSError):
        return EXIT_CODES["io"]
    for cls in type(exc).__mro__:
        if cls in ERROR_EXIT:
            return EXIT_CODES[ERROR_EXIT[cls]]
    return 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "run": {"out": "results", "seed": 0, "threads": 0},
    "solver": {"m": 6, "tau": 1.0, "tol": 1e-8, "shift": -0.5, "order": 2,
               "max_iter": 300},
    "cube": {"n_mesh": 8, "side_over_pi": 1.0},
    "family": {"lengths": [0.6, 0.45], "depth": 0.5, "alpha": 2.0,
               "b_amp": 1.0, "b_kind": "cos2pi", "kappa_scale": 0.35},
    "sweep": {"eps_list": [0.2, 0.1, 0.05], "m": 6, "h_factor": 8.0, "nz": 8,
              "gap_tol": 0.05, "order": 1},
    "mesh": {"n": [16, 16, 8], "eps": 0.1},
    "piola": {"eps_list": [0.2, 0.1, 0.05], "quadrature_n": 6},
    "mazya": {"profile": "oscillatory", "rho_list": [0.2, 0.1, 0.05],
              "delta": 0.1, "dim": 3, "alpha": 2.0, "eps": 0.1, "beta": 0.75,
              "quad_n": 12},
    "atlas_check": {"k": 1, "gamma": 1.0, "grid_n": 128, "eps": 0.1,
                    "domain_spec": ""},
}


@dataclass
class RunConfig:
    command: str
    sections: dict = dc_field(default_factory=dict)
    path: str = ""

    def __getitem__(self, key):
        return self.sections[key]

    def get(self, section, key):
        return self.sections[section][key]


def _merged(defaults, user):
    out = {}
    for sec, vals in defaults.items():
        out[sec] = dict(vals)
        out[sec].update(user.get(sec, {}))
    for sec in user:
        if sec not in out:
            raise err.ConfigError(f"unknown config section [{sec}]")
    return out


def _require(cond, msg):
    if not cond:
        raise err.ConfigError(msg)


def validate_config(cfg: RunConfig) -> RunConfig:
    s = cfg.sections
    _require(cfg.command in COMMANDS,
             f"run.command must be one of {COMMANDS}, got '{cfg.command}'")
    sol = s["solver"]
    _require(sol["tau"] > 0, "solver.tau must be positive")
    _require(0 < sol["tol"] <= 1e-2, "solver.tol must lie in (0, 1e-2]")
    _require(1 <= sol["m"] <= 200, "solver.m must lie in [1, 200]")
    _require(sol["order"] in (1, 2), "solver.order must be 1 or 2")
    _require(s["sweep"]["gap_tol"] > 0, "sweep.gap_tol must be positive")
    _require(all(e > 0 for e in s["sweep"]["eps_list"]),
             "sweep.eps_list entries must be positive")
    _require(s["family"]["depth"] > 0, "family.depth must be positive")
    _require(len(s["family"]["lengths"]) == 2
             and all(v > 0 for v in s["family"]["lengths"]),
             "family.lengths must be two positive numbers")
    _require(s["mazya"]["dim"] in (2, 3), "mazya.dim must be 2 or 3")
    return cfg


def parse_config(path) -> RunConfig:
    """Load and validate a TOML run configuration (line-numbered parse errors)."""
    path = Path(path)
    if not path.exists():
        raise err.ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise err.ConfigError(f"{path}: {e}") from e
    run = raw.get("run", {})
    command = run.get("command")
    _require(command is not None, "missing run.command")
    sections = _merged(_DEFAULTS, raw)
    sections["run"]["command"] = command
    cfg = RunConfig(command=command, sections=sections, path=str(path))
    return validate_config(cfg)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise err.ConfigError(f"cannot serialize config value {v!r}")


def emit_config(cfg: RunConfig) -> str:
    """Canonical TOML text of a config; re-parsing reproduces the sections."""
    lines = []
    for sec in sorted(cfg.sections):
        lines.append(f"[{sec}]")
        for key in sorted(cfg.sections[sec]):
            lines.append(f"{key} = {_toml_value(cfg.sections[sec][key])}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, schema: str, header, rows):
    with open(path, "w") as fh:
        fh.write(f"# cavistab csv v1 schema={schema}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    log.info("wrote %s (%d rows)", path, len(rows))


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _family_from(cfg: RunConfig):
    f = cfg.sections["family"]
    return oscillating_box_family(
        lengths=tuple(f["lengths"]), depth=f["depth"], alpha=f["alpha"],
        b_amp=f["b_amp"], b_kind=f["b_kind"], kappa_scale=f["kappa_scale"])


def _cmd_cube_bench(cfg, outdir):
    sol = cfg.sections["solver"]
    cube = cfg.sections["cube"]
    res = cube_benchmark(tau=sol["tau"], n_mesh=cube["n_mesh"],
                         order=sol["order"], m=sol["m"],
                         side=math.pi * cube["side_over_pi"],
                         tol=sol["tol"], shift=sol["shift"])
    write_csv(outdir / "spectrum.csv", "cube-bench-clusters",
              ["lam_exact", "lam_mean", "rel_err", "mult_exact", "mult_found",
               "maxwell_found", "gradient_found"], res.csv_rows())
    log.info("cube benchmark: max rel err %.4g, all clusters ok: %s",
             res.max_rel_err, all(r.ok for r in res.rows))
    return 0


def _cmd_solve(cfg, outdir):
    sol = cfg.sections["solver"]
    fam = _family_from(cfg)
    eps = cfg.sections["mesh"]["eps"]
    n = cfg.sections["mesh"]["n"]
    Lx, Ly = fam.lengths
    box = mesh_box(((0, Lx), (0, Ly)), -fam.depth, 0.0, n)
    profile = fam.domain(eps).profiles[0] if eps > 0 else fam.base.profiles[0]
    mesh = shear_fit(box, profile, -fam.depth, 0.0) if eps > 0 else box
    space = build_space(mesh, order=sol["order"])
    A = assemble_stiffness(space, tau=sol["tau"])
    M = assemble_mass(space)
    s = solve_gevp(A, M, m=sol["m"], shift=sol["shift"], tol=sol["tol"],
                   max_iter=sol["max_iter"], method="lanczos",
                   seed=cfg.sections["run"]["seed"])
    s = classify_modes(s, space, tau=sol["tau"])
    write_csv(outdir / "spectrum.csv", "spectrum",
              ["index", "lambda", "residual", "div_energy_ratio", "tag"],
              s.csv_rows())
    return 0


def _cmd_mesh(cfg, outdir):
    fam = _family_from(cfg)
    eps = cfg.sections["mesh"]["eps"]
    n = cfg.sections["mesh"]["n"]
    Lx, Ly = fam.lengths
    box = mesh_box(((0, Lx), (0, Ly)), -fam.depth, 0.0, n)
    profile = fam.domain(eps).profiles[0] if eps > 0 else fam.base.profiles[0]
    mesh = shear_fit(box, profile, -fam.depth, 0.0) if eps > 0 else box
    mesh.validate()
    q = mesh_quality(mesh)
    log.info("mesh quality: min vol %.3e, max aspect %.2f, h_max %.4f",
             q.min_signed_volume, q.max_aspect_ratio, q.h_max)
    write_mesh_text(mesh, str(outdir / "mesh.txt"))
    return 0


def _cmd_sweep(cfg, outdir):
    fam = _family_from(cfg)
    sw = cfg.sections["sweep"]
    sol = cfg.sections["solver"]
    policy = MeshPolicy(h_factor=sw["h_factor"], nz=sw["nz"], order=sw["order"])
    solver = SolverConfig(m=max(sw["m"] + 4, sol["m"]), tol=sol["tol"],
                          shift=sol["shift"], tau=sol["tau"],
                          max_iter=sol["max_iter"],
                          seed=cfg.sections["run"]["seed"])
    rep = sweep_epsilon(fam, sw["eps_list"], policy=policy, solver=solver,
                        m=sw["m"], gap_tol=sw["gap_tol"])
    write_csv(outdir / "report.csv", "sweep-report",
              ["eps", "nx", "ny", "nz", "n", "lambda", "tag", "lambda_ref",
               "gap", "rel_gap", "gaffney", "volume_diff"], rep.csv_rows())
    lines = [
        f"eps list: {rep.eps_list}",
        f"exploratory (alpha <= 3/2): {rep.exploratory}",
        f"max gap sequence: {rep.max_gap_sequence}",
        f"gaps decreasing: {rep.gaps_decreasing}",
        f"final rel gap ok (< {rep.gap_tol}): {rep.final_gap_ok}",
        f"e-distances decreasing: {rep.e_distances_decreasing}",
        f"gaffney spread: {rep.gaffney_spread:.4f}",
        f"passed: {rep.passed}",
    ]
    (outdir / "summary.txt").write_text("\n".join(lines) + "\n")
    log.info("sweep summary: passed=%s", rep.passed)
    return 0


def _cmd_piola_verify(cfg, outdir):
    fam = _family_from(cfg)
    pc = cfg.sections["piola"]
    fields = make_box_test_fields(fam.lengths, fam.depth)
    for phi in fields:
        rows = []
        for eps in pc["eps_list"]:
            pm = piola_map_for_family(fam, eps)
            rep = verify_piolamain(phi, pm, quadrature_n=pc["quadrature_n"],
                                   eps=eps)
            rows.append(rep.csv_row())
        write_csv(outdir / f"piola_{phi.name}.csv", "piola-verify",
                  ["eps", "norm_source", "norm_target", "overlap_distance",
                   "min_det", "max_det"], rows)
    return 0


def _mazya_profile(mz):
    kind = mz["profile"]
    if kind == "oscillatory":
        return ProfileFunction.oscillatory(alpha=mz["alpha"], eps=mz["eps"])
    if kind == "hoelder_power":
        return ProfileFunction.hoelder_power(beta=mz["beta"])
    if kind == "log_counterexample":
        return ProfileFunction.log_counterexample()
    if kind == "constant":
        return ProfileFunction.constant(0.0)
    raise err.ConfigError(f"mazya.profile '{kind}' not in catalog")


def _cmd_mazya(cfg, outdir):
    mz = cfg.sections["mazya"]
    g = _mazya_profile(mz)
    reports = mazya_criterion(g, delta=mz["delta"], rho_list=mz["rho_list"],
                              N=mz["dim"], quad_n=mz["quad_n"])
    write_csv(outdir / "mazya.csv", "mazya-criterion",
              ["profile", "rho", "d32_term", "grad_sup", "delta",
               "dini_value_or_flag"], [r.csv_row() for r in reports])
    return 0


def _cmd_check_atlas(cfg, outdir):
    from .atlas import check_atlas_class, check_convergence_conditions, \
        load_domain_spec

    fam = _family_from(cfg)
    ac = cfg.sections["atlas_check"]
    if ac.get("domain_spec"):
        dom = load_domain_spec(ac["domain_spec"])
    else:
        dom = fam.domain(ac["eps"])
    dom.validate(grid_n=min(64, ac["grid_n"]))
    m_est = check_atlas_class(dom, ac["k"], ac["gamma"], grid_n=ac["grid_n"])
    rep = check_convergence_conditions(fam, cfg.sections["sweep"]["eps_list"],
                                       grid_n=ac["grid_n"])
    rows = [[r.eps, r.kappa, r.sup_diff, r.ratios[0], r.ratios[1], r.ratios[2],
             r.kappa_dominates] for r in rep.rows]
    write_csv(outdir / "conditions.csv", "atlas-conditions",
              ["eps", "kappa", "sup_diff", "ratio_order0", "ratio_order1",
               "ratio_order2", "kappa_dominates"], rows)
    (outdir / "summary.txt").write_text(
        f"class norm estimate (k={ac['k']}, gamma={ac['gamma']}): {m_est!r}\n"
        f"ratios decreasing per order: {rep.decreasing}\n")
    log.info("atlas class estimate %.6g; ratios decreasing: %s", m_est,
             rep.decreasing)
    return 0


_DISPATCH = {
    "cube-bench": _cmd_cube_bench,
    "solve": _cmd_solve,
    "mesh": _cmd_mesh,
    "sweep": _cmd_sweep,
    "piola-verify": _cmd_piola_verify,
    "mazya": _cmd_mazya,
    "check-atlas": _cmd_check_atlas,
}


def run(cfg: RunConfig) -> int:
    """Execute a validated config; artifacts land in the output directory."""
    outdir = Path(cfg.sections["run"]["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(outdir / "run.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    try:
        (outdir / "config.toml").write_text(emit_config(cfg))
        return _DISPATCH[cfg.command](cfg, outdir)
    finally:
        log.removeHandler(fh)
        fh.close()


def _apply_threads(n: int):
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(n)
        except ImportError:
            pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cavistab",
        description="cavity curl-curl spectral stability laboratory")
    parser.add_argument("--config", required=True, help="TOML run config")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--threads", type=int, default=None,
                        help="thread cap (also CAVISTAB_THREADS)")
    parser.add_argument("--verbose", action="store_true")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES["config"] if e.code not in (0, None) else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args.config)
        if args.out:
            cfg.sections["run"]["out"] = args.out
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get("CAVISTAB_THREADS",
                                         cfg.sections["run"]["threads"]) or 0)
        _apply_threads(threads)
        return run(cfg)
    except Exception as e:  # noqa: BLE001 - single exit-code funnel
        code = exit_code_for(e)
        log.error("%s (exit %d)", e, code)
        return code


if __name__ == "__main__":
    sys.exit(main())
