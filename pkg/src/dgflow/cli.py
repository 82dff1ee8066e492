"""Command-line front end: reproduce the benchmark tables as CSV, plus a
self-check of the fast structural invariants.

Experiments
    table1    no-flow, triangles P3/P2, gamma and gamma_gd sweeps
    table2    vortex, distance of the penalized solution to the normal-continuous one
    table3    no-flow, quadrilaterals Q3/Q2, penalty interplay
    table4    potential flow (Navier-Stokes), triangles P4/P3
    table5    potential flow (Navier-Stokes), quadrilaterals Q4/Q3
    cr-noflow Crouzeix-Raviart no-flow gamma sweep
    cr-rates  Crouzeix-Raviart h-refinement rates
    selfcheck fast invariant suite

All flags are also settable via DGPL_* environment variables (flag wins).
Exit codes: 0 success, 1 bad configuration, 2 solver nonconvergence.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analysis import builtin_case, compare_discrete, compute_errors
from .forms import StabilizationParams
from .mesh import (
    MeshLoadError,
    build_structured_quad_mesh,
    build_structured_triangle_mesh,
    load_mesh,
)
from .solver import (
    ProblemSetup,
    SolverError,
    default_sigma,
    solve_linear_saddle,
    solve_nse_picard,
    solve_stokes_cr,
    solve_stokes_dg,
    solve_stokes_hdiv,
)

EXPERIMENTS = ("table1", "table2", "table3", "table4", "table5", "cr-noflow", "cr-rates")
CSV_HEADER = "gamma,gamma_gd,l2_u,h1_broken_u,l2_p,div_broken,nj,picard_iters,converged"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    k: Optional[int] = None
    n: Optional[int] = None
    nu: Optional[float] = None
    sigma: Optional[float] = None
    gamma: Optional[list] = None
    gamma_gd: Optional[list] = None
    mesh_file: Optional[str] = None
    out: Optional[str] = None
    threads: int = 1
    picard_tol: float = 1e-8
    picard_max: int = 25
    plot: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.gamma is not None and not self.gamma:
            raise ConfigError("empty gamma list")
        if self.gamma_gd is not None and not self.gamma_gd:
            raise ConfigError("empty gamma_gd list")
        for name, lst in (("gamma", self.gamma), ("gamma_gd", self.gamma_gd)):
            if lst is not None and any(g < 0 for g in lst):
                raise ConfigError(f"{name} values must be nonnegative")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.k is not None and not (1 <= self.k <= 6):
            raise ConfigError("k must be in 1..6")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.nu is not None and self.nu <= 0:
            raise ConfigError("nu must be positive")
        if self.picard_tol <= 0 or self.picard_max < 1:
            raise ConfigError("bad Picard settings")


_DECADES = [1.0, 10.0, 100.0, 1000.0]

_DEFAULTS = {
    # experiment: (case, cell kind, k, n, nu, default (gamma, gamma_gd) pairs)
    "table1": ("noflow", "tri-left", 3, 32, 1e-4,
               [(0.0, 0.0), (0.1, 0.0)] + [(g, 0.0) for g in _DECADES]
               + [(0.0, 0.1)] + [(0.0, g) for g in _DECADES]),
    "table2": ("vortex", "tri-left", 3, 20, 1e-3,
               [(0.0, 0.0)] + [(g, 0.0) for g in _DECADES]),
    "table3": ("noflow", "quad", 3, 32, 1e-4,
               [(0.0, 0.0)] + [(g, 0.0) for g in _DECADES]
               + [(0.0, g) for g in _DECADES] + [(g, g) for g in _DECADES]),
    "table4": ("potential", "tri", 4, 20, 1e-2,
               [(0.0, 0.0)] + [(g, 0.0) for g in [10.0, 100.0, 1000.0, 10000.0]]),
    "table5": ("potential", "quad", 4, 20, 1e-2,
               [(0.0, 0.0)] + [(g, g) for g in [10.0, 100.0, 1000.0, 10000.0]]),
    "cr-noflow": ("noflow", "tri", 1, 32, 1.0,
                  [(0.0, 0.0), (1.0, 0.0), (10.0, 0.0), (100.0, 0.0)]),
    "cr-rates": ("vortex", "tri", 1, None, 1.0, [(1.0, 0.0)]),
}


def _pairs(config: ExperimentConfig, defaults):
    """(gamma, gamma_gd) rows: experiment defaults, or the product of the lists."""
    if config.gamma is None and config.gamma_gd is None:
        return list(defaults)
    gammas = config.gamma if config.gamma is not None else [0.0]
    gds = config.gamma_gd if config.gamma_gd is not None else [0.0]
    if config.experiment == "table5" and config.gamma_gd is None:
        return [(g, g) for g in gammas]  # tensor-product convention: one knob
    return [(g, gd) for g in gammas for gd in gds]


def _build_mesh(kind: str, n: int, box, mesh_file: Optional[str]):
    if mesh_file is not None:
        try:
            with open(mesh_file) as fh:
                return load_mesh(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read mesh file {mesh_file!r}: {exc}") from exc
        except MeshLoadError as exc:
            raise ConfigError(f"bad mesh file {mesh_file!r}: {exc}") from exc
    if kind == "quad":
        return build_structured_quad_mesh(n, box)
    diagonal = "left" if kind == "tri-left" else "right"
    return build_structured_triangle_mesh(n, box, diagonal=diagonal)


def _fmt(x: float) -> str:
    return f"{x:.5e}"


def _row_csv(gamma, gd, err, iters, converged, extra=""):
    cells = [
        _fmt(gamma), _fmt(gd), _fmt(err.l2_u), _fmt(err.h1_broken_u), _fmt(err.l2_p),
        _fmt(err.div_broken), _fmt(err.nj_seminorm), str(iters),
        "true" if converged else "false",
    ]
    return ",".join(cells) + extra


def run_table(config: ExperimentConfig):
    """Execute one experiment; returns (csv_text, exit_code)."""
    case_name, kind, k0, n0, nu0, default_pairs = _DEFAULTS[config.experiment]
    k = config.k if config.k is not None else k0
    n = config.n if config.n is not None else n0
    nu = config.nu if config.nu is not None else nu0
    sigma = config.sigma if config.sigma is not None else default_sigma(k)
    case = builtin_case(case_name, nu)
    pairs = _pairs(config, default_pairs)
    box = case.domain_box

    header = CSV_HEADER
    exit_code = 0

    if config.experiment == "cr-rates":
        header += ",n"
        rows = []
        ns = [config.n] if config.n is not None else [8, 16, 32]
        gamma, gd = pairs[0]
        for nn in ns:
            mesh = _build_mesh(kind, nn, box, None)
            setup = ProblemSetup(mesh, 1, case, sigma, method="cr")
            params = StabilizationParams(nu=nu, sigma=sigma, gamma=gamma)
            res = solve_stokes_cr(mesh, case, params, setup=setup)
            err = compute_errors(res, setup, case)
            rows.append(_row_csv(gamma, gd, err, 0, True, f",{nn}"))
        return header + "\n" + "\n".join(rows) + "\n", exit_code

    mesh = _build_mesh(kind, n, box, config.mesh_file)
    method = "cr" if config.experiment == "cr-noflow" else "dg"
    setup = ProblemSetup(mesh, k, case, sigma, method=method)

    reference = None
    if config.experiment == "table2":
        reference = solve_stokes_hdiv(mesh, k, case, sigma=sigma, setup=setup)

    def compute_row(pair):
        gamma, gd = pair
        params = StabilizationParams(nu=nu, sigma=sigma, gamma=gamma, gamma_gd=gd)
        if config.experiment in ("table4", "table5"):
            res = solve_nse_picard(
                mesh, k, case, params,
                tol=config.picard_tol, max_iters=config.picard_max, setup=setup,
            )
        elif config.experiment == "cr-noflow":
            res = solve_stokes_cr(mesh, case, params, setup=setup)
        else:
            res = solve_stokes_dg(mesh, k, case, params, setup=setup)
        err = compute_errors(res, setup, case)
        if reference is not None:
            d_l2, d_h1, d_p = compare_discrete(res, reference, setup)
            err.l2_u, err.h1_broken_u, err.l2_p = d_l2, d_h1, d_p
        return _row_csv(gamma, gd, err, res.picard_iters, res.converged), res.converged, err

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(compute_row, pairs))
    else:
        results = [compute_row(p) for p in pairs]

    rows = [r[0] for r in results]
    if not all(r[1] for r in results):
        exit_code = 2
    csv_text = header + "\n" + "\n".join(rows) + "\n"
    if config.plot:
        _write_plot(config, pairs, [r[2] for r in results])
    return csv_text, exit_code


def _plot_path(config: ExperimentConfig) -> str:
    if config.out:
        base, _ = os.path.splitext(config.out)
        return base + ".png"
    return config.experiment + ".png"


def _write_plot(config, pairs, errs):
    """Log-log velocity error and normal-jump seminorm against gamma."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    gs = np.array([max(p[0], p[1]) for p in pairs])
    keep = gs > 0
    if not keep.any():
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    for attr, label in [("l2_u", "velocity L2 error"), ("nj_seminorm", "normal-jump seminorm"),
                        ("div_broken", "broken divergence")]:
        vals = np.array([getattr(e, attr) for e in errs])[keep]
        if (vals > 0).all():
            ax.loglog(gs[keep], vals, "o-", label=label)
    ax.set_xlabel("penalty parameter")
    ax.set_ylabel("error")
    ax.set_title(config.experiment)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(_plot_path(config), dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# selfcheck


def run_selfcheck(stream=None, corrupt_constraints: bool = False) -> int:
    """Fast invariant suite; prints PASS/FAIL per item, returns exit code."""
    import math

    if stream is None:
        stream = sys.stdout

    from .analysis import make_polynomial_case
    from .quadrature import triangle_rule
    from .spaces import (
        SpaceConfig,
        build_normal_constraints,
        build_space,
        interpolate_bdm,
        l2_project_pressure,
    )
    from .forms import assemble_energy_matrix, assemble_sip
    from ._oracle import dense_operators

    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}", file=stream)
        if not ok:
            failures += 1

    # quadrature exactness on the triangle
    rule = triangle_rule(6)
    ok = True
    for a in range(7):
        for b in range(7 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            got = rule.weights @ (rule.points[:, 0] ** a * rule.points[:, 1] ** b)
            ok &= abs(got - exact) < 1e-14
    check("triangle quadrature exact to degree 6", ok)

    # basis orthonormality
    from .quadrature import reference_rule

    ok = True
    for kind in ("triangle", "quadrilateral"):
        from .spaces import _scalar_basis

        basis = _scalar_basis(kind, 3)
        r = reference_rule(kind, 8)
        vals, _ = basis.eval(r.points)
        G = (vals * r.weights) @ vals.T
        ok &= np.abs(G - np.eye(basis.size)).max() < 1e-12
    check("reference bases L2-orthonormal (k=3)", ok)

    # commuting diagram: div(BDM interp) = L2 projection of div
    mesh = build_structured_triangle_mesh(3)
    V = build_space(mesh, SpaceConfig("Pk_dc_vector", 2))
    Q = build_space(mesh, SpaceConfig("Pk_dc_scalar", 1), V.facets)
    rng = np.random.default_rng(7)
    cu = rng.standard_normal((2, 3, 3))  # polynomial coefficient tensors

    def u(x):
        vx = sum(cu[0, a, b] * x[:, 0] ** a * x[:, 1] ** b for a in range(3) for b in range(3 - a))
        vy = sum(cu[1, a, b] * x[:, 0] ** a * x[:, 1] ** b for a in range(3) for b in range(3 - a))
        return np.column_stack([vx, vy])

    def divu(x):
        dx = sum(a * cu[0, a, b] * x[:, 0] ** (a - 1) * x[:, 1] ** b
                 for a in range(1, 3) for b in range(3 - a))
        dy = sum(b * cu[1, a, b] * x[:, 0] ** a * x[:, 1] ** (b - 1)
                 for a in range(3) for b in range(1, 3 - a))
        return dx + dy

    bdm = interpolate_bdm(V, u, data_degree=10)
    if corrupt_constraints:
        bdm = bdm + 1e-3 * rng.standard_normal(bdm.shape)
    pdiv = l2_project_pressure(Q, divu, data_degree=10)
    # compare cellwise: div of interpolant expanded in the pressure basis
    from .spaces import cell_jacobians as _cj
    from .quadrature import reference_rule as _rr

    r = _rr("triangle", 6)
    qvals, _ = Q.basis.eval(r.points)
    _, ref_grads = V.basis.eval(r.points)
    worst = 0.0
    for c in range(mesh.num_cells):
        g = V.cell_gradients(c, r.points, ref_grads)
        _, det, _ = _cj(mesh, c, r.points)
        dofs = V.cell_dofs(c)
        div_h = bdm[dofs[: V.ns]] @ g[:, :, 0] + bdm[dofs[V.ns :]] @ g[:, :, 1]
        p_h = pdiv[Q.cell_dofs(c)] @ qvals
        worst = max(worst, float(np.abs(div_h - p_h).max()))
    check("commuting diagram: div of interpolant = projected div", worst < 1e-10)

    # coercivity budget: a_h(v,v) >= 0.25 |v|_e^2 at sigma = 4k^2
    ok = True
    for k in (1, 2, 3):
        mesh4 = build_structured_triangle_mesh(4)
        Vk = build_space(mesh4, SpaceConfig("Pk_dc_vector", k))
        A = assemble_sip(Vk, Vk.facets, default_sigma(k))
        E = assemble_energy_matrix(Vk, Vk.facets, default_sigma(k))
        vs = rng.standard_normal((20, Vk.dim))
        ok &= all(v @ (A @ v) >= 0.25 * (v @ (E @ v)) - 1e-12 for v in vs)
    check("SIP coercivity budget a(v,v) >= 0.25 |v|_e^2", ok)

    # tiny dense oracle
    from . import forms as _forms

    mesh2 = build_structured_triangle_mesh(1)
    V1 = build_space(mesh2, SpaceConfig("Pk_dc_vector", 1))
    Q1 = build_space(mesh2, SpaceConfig("Pk_dc_scalar", 0), V1.facets)
    Ad, Jd, GDd, Bd, md = dense_operators(V1, Q1, 4.0)
    A1 = _forms.assemble_sip(V1, V1.facets, 4.0).toarray()
    J1 = _forms.assemble_jh_flux(V1, V1.facets).toarray()
    B1 = _forms.assemble_bh(V1, Q1, V1.facets).toarray()
    ok = (
        np.abs(Ad - A1).max() < 1e-10
        and np.abs(Jd - J1).max() < 1e-10
        and np.abs(Bd - B1).max() < 1e-10
    )
    check("dense-oracle operator match (2 triangles, k=1)", ok)

    # polynomial exactness of the full solve
    case = make_polynomial_case(2)
    m4 = build_structured_triangle_mesh(2)
    params = StabilizationParams(nu=1.0, sigma=default_sigma(2))
    setup = ProblemSetup(m4, 2, case, params.sigma)
    res = solve_stokes_dg(m4, 2, case, params, setup=setup)
    err = compute_errors(res, setup, case)
    check("polynomial Stokes solve exact to 1e-9", err.l2_u < 1e-9 and err.l2_p < 1e-9)

    print(("OK" if failures == 0 else f"{failures} check(s) FAILED"), file=stream)
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad config -> exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _env(name, cast, default=None):
    raw = os.environ.get("DGPL_" + name)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"bad value for DGPL_{name}: {raw!r}")


def _float_list(s: str):
    try:
        return [float(v) for v in s.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def build_parser() -> _Parser:
    p = _Parser(prog="dgflow", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=EXPERIMENTS + ("selfcheck",))
    p.add_argument("--k", type=int, default=_env("K", int))
    p.add_argument("--n", type=int, default=_env("N", int))
    p.add_argument("--nu", type=float, default=_env("NU", float))
    p.add_argument("--sigma", type=float, default=_env("SIGMA", float))
    p.add_argument("--gamma", type=_float_list, default=_env("GAMMA", _float_list))
    p.add_argument("--gamma-gd", type=_float_list, default=_env("GAMMA_GD", _float_list))
    p.add_argument("--mesh-file", default=_env("MESH_FILE", str))
    p.add_argument("--out", default=_env("OUT", str))
    p.add_argument("--threads", type=int, default=_env("THREADS", int, 1))
    p.add_argument("--picard-tol", type=float, default=_env("PICARD_TOL", float, 1e-8))
    p.add_argument("--picard-max", type=int, default=_env("PICARD_MAX", int, 25))
    p.add_argument("--plot", action="store_true",
                   default=bool(_env("PLOT", int, 0)))
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.experiment == "selfcheck":
        return run_selfcheck()
    try:
        config = ExperimentConfig(
            experiment=args.experiment, k=args.k, n=args.n, nu=args.nu,
            sigma=args.sigma, gamma=args.gamma, gamma_gd=args.gamma_gd,
            mesh_file=args.mesh_file, out=args.out, threads=args.threads,
            picard_tol=args.picard_tol, picard_max=args.picard_max, plot=args.plot,
        )
        csv_text, code = run_table(config)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    if config.out:
        with open(config.out, "w") as fh:
            fh.write(csv_text)
        nrows = csv_text.count("\n") - 1
        print(f"{config.experiment}: {nrows} rows -> {config.out}", file=sys.stderr)
    else:
        sys.stdout.write(csv_text)
    return code


if __name__ == "__main__":
    sys.exit(main())
