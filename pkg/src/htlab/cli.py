"""Command-line front door: config-driven runs with deterministic reports.

Subcommands cover the pipeline stages: `model` validates the reversible
model, `fk` solves the two weight functions, `transform` builds the
reweighted process, `sample` draws reference or transformed paths, `check`
runs the residual checks, `hjb` evaluates both Hamilton-Jacobi residual
forms, `bridge` runs iterative proportional fitting, `diffusion` runs the
PDE pipeline, and `report` aggregates the pass/fail summary.

Exit codes: 0 success, 2 config or model validation failure, 3 numerical
check failure beyond tolerance. All failures carry machine-readable reason
strings on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from htlab import bridge as bridge_mod
from htlab import diffusion1d, generator_lab, h_transform, hjb_check
from htlab import orlicz_diag
from htlab.config import RunConfig, build_model_from_config, load_config, \
    transform_pieces
from htlab.errors import (ConvergenceError, HTLabError, InconsistencyError,
                          ModelValidationError)
from htlab.feynman_kac import (check_fk_generator, check_semigroup,
                               fk_propagator, solve_fk)
from htlab.markov_core import (ReversibleModel, detailed_balance_violation,
                               sample_paths_R)
from htlab.reports import (diffusion_rows, field_rows, kernel_rows, path_rows,
                           write_csv, write_text)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CHECK = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htlab",
        description="Reweighted Markov dynamics: solvers, samplers, checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in [
            ("model", "build and validate the configured model"),
            ("fk", "solve the backward and forward weight functions"),
            ("transform", "build the transformed process and its reports"),
            ("sample", "draw reference or transformed paths"),
            ("check", "run residual and inequality checks"),
            ("hjb", "evaluate both Hamilton-Jacobi residual forms"),
            ("bridge", "fit endpoint marginals by proportional scaling"),
            ("diffusion", "run the one-dimensional PDE pipeline"),
            ("report", "aggregate pass/fail across configured checks")]:
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for independent checks (currently "
                            "informational; runs are serial)")
        p.add_argument("--verbose", action="store_true")
    return parser


def _say(args, text: str):
    if args.verbose:
        print(text)


def _jump_model(cfg: RunConfig) -> ReversibleModel:
    model = build_model_from_config(cfg)
    if not isinstance(model, ReversibleModel):
        raise ModelValidationError(
            "this subcommand needs a jump model (model.kind: jump)",
            reason="wrong_model_kind")
    return model


def _hprocess(cfg: RunConfig):
    model = _jump_model(cfg)
    grid = cfg.time_grid
    f0, gamma1, V = transform_pieces(cfg, model, grid)
    return model, grid, h_transform.build_h_process(model, f0, gamma1, V, grid)


def _check_times(cfg: RunConfig, grid) -> list[float]:
    times = cfg.checks.get("times", [0.25, 0.5, 0.75])
    return [float(t) for t in times]


def cmd_model(cfg: RunConfig, args) -> int:
    model = build_model_from_config(cfg)
    lines = []
    if isinstance(model, ReversibleModel):
        lines.append(f"kind=jump states={model.n}")
        lines.append("labels=" + ",".join(model.space.labels))
        lines.append("m=" + ",".join(repr(float(v)) for v in model.m))
        lines.append("exit_rates=" + ",".join(
            repr(float(v)) for v in model.J.exit_rates))
        lines.append(f"detailed_balance_violation="
                     f"{detailed_balance_violation(model.J.rates, model.m)!r}")
        lines.append("irreducible=yes")
    else:
        lines.append(f"kind=diffusion M={model.M} "
                     f"x_min={model.x_min!r} x_max={model.x_max!r}")
        lines.append(f"dx={model.dx!r}")
    write_text(os.path.join(args.out, "model_summary.txt"), lines)
    _say(args, "model ok")
    return EXIT_OK


def cmd_fk(cfg: RunConfig, args) -> int:
    model = _jump_model(cfg)
    grid = cfg.time_grid
    f0, gamma1, V = transform_pieces(cfg, model, grid)
    fk = solve_fk(model, V, f0, gamma1, grid)
    rows = ((t, x, fk.g[k, x], fk.f[k, x])
            for k, t in enumerate(grid.nodes) for x in range(model.n))
    write_csv(os.path.join(args.out, "fk.csv"),
              ["t", "state", "g", "f"], rows, meta={"grid_N": grid.N})
    _say(args, f"fk solved on N={grid.N}")
    return EXIT_OK


def cmd_transform(cfg: RunConfig, args) -> int:
    model, grid, hp = _hprocess(cfg)
    marg = np.array([h_transform.marginal(hp, t) for t in grid.nodes])
    write_csv(os.path.join(args.out, "marginals.csv"),
              ["t", "state", "p"], field_rows(grid.nodes, marg),
              meta={"grid_N": grid.N})
    times = _check_times(cfg, grid)
    kernels = [h_transform.jump_kernel(hp, t) for t in times]
    write_csv(os.path.join(args.out, "kernel.csv"),
              ["t", "from", "to", "rate"], kernel_rows(times, kernels),
              meta={"grid_N": grid.N})
    entropy = h_transform.relative_entropy(hp)
    suff = h_transform.entropy_sufficiency_report(hp.f0.f0, hp.gamma1.gamma1,
                                                  model.m)
    write_text(os.path.join(args.out, "transform_summary.txt"),
               [f"normalization_c={hp.c!r}",
                f"relative_entropy={entropy!r}",
                suff.report().rstrip()])
    _say(args, f"transform built, H(P|R)={entropy:.6g}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed()
    n_paths = int(cfg.sampling.get("n_paths", 1000))
    process = str(cfg.sampling.get("process", "P"))
    if process == "P":
        model, grid, hp = _hprocess(cfg)
        paths = h_transform.sample_paths_P(hp, n_paths, seed)
    elif process == "R":
        model = _jump_model(cfg)
        paths = sample_paths_R(model, n_paths, seed)
    else:
        raise ModelValidationError(
            f"sampling.process must be 'R' or 'P', got {process!r}",
            reason="bad_config")
    write_csv(os.path.join(args.out, "paths.csv"),
              ["path_id", "time", "state"], path_rows(paths),
              meta={"process": process, "seed": seed, "n_paths": n_paths})
    _say(args, f"sampled {n_paths} {process}-paths")
    return EXIT_OK


def _run_checks(cfg: RunConfig, args) -> list[tuple[str, bool, str]]:
    """Shared body of `check` and `report`: named pass/fail results."""
    model, grid, hp = _hprocess(cfg)
    checks = cfg.checks
    tol_semigroup = float(checks.get("tolerance_semigroup", 1e-8))
    tol_pde = float(checks.get("tolerance_pde", 1e-6))
    tol_generator = float(checks.get("tolerance_generator", 1e-5))
    results = []

    mid = 0.5 if grid.N % 2 == 0 else (grid.N // 2) / grid.N
    gap = check_semigroup(hp.fk.propagator, 0.0, mid, 1.0)
    results.append(("semigroup_identity", gap <= tol_semigroup,
                    f"gap={gap:.3e} tol={tol_semigroup:.1e}"))

    res = check_fk_generator(hp.model, hp.V, hp.fk.g, grid)
    results.append(("backward_equation_residual", res.max_residual <= tol_pde,
                    f"max={res.max_residual:.3e} tol={tol_pde:.1e}"))

    seed = int(cfg.sampling.get("seed", 0))
    streams = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(streams[0])
    worst = 0.0
    for t in _check_times(cfg, grid):
        for _ in range(3):
            u = rng.standard_normal(model.n)
            res = generator_lab.check_transformed_generator(hp, u, t)
            worst = max(worst, res.max_residual)
    results.append(("transformed_generator_identity", worst <= tol_generator,
                    f"max={worst:.3e} tol={tol_generator:.1e}"))

    rng2 = np.random.default_rng(streams[1])
    mw = orlicz_diag.WeightedMeasure(weights=model.m)
    holder_ok = True
    detail = ""
    for kind, p in [("theta_exp", None), ("power", 2.0)]:
        gammaY = orlicz_diag.YoungFunction(kind, p)
        for _ in range(5):
            u = rng2.standard_normal(model.n)
            v = rng2.standard_normal(model.n)
            hc = orlicz_diag.holder_check(u, v, mw, gammaY)
            if not hc.satisfied:
                holder_ok = False
                detail = f"lhs={hc.lhs:.3e} rhs={hc.rhs:.3e}"
    results.append(("holder_inequality", holder_ok, detail or "all pairs ok"))

    rep = orlicz_diag.hypothesis_report(
        hp.f0.f0, hp.gamma1.gamma1, hp.V.values, mw,
        orlicz_diag.YoungFunction("theta_star_llogl"))
    results.append(("integrability_hypotheses",
                    rep.verdict.startswith("satisfied"),
                    f"sup_conjugate_integral={rep.sup_v_conjugate_integral:.3e}"))
    return results


def _write_check_report(results, out_dir: str, name: str) -> int:
    lines = []
    failed = False
    for label, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        failed = failed or not ok
        lines.append(f"{status} {label} {detail}")
    write_text(os.path.join(out_dir, name), lines)
    for line in lines:
        print(line)
    if failed:
        print("error: reason=check_failure", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_check(cfg: RunConfig, args) -> int:
    return _write_check_report(_run_checks(cfg, args), args.out,
                               "check_report.txt")


def cmd_hjb(cfg: RunConfig, args) -> int:
    model, grid, hp = _hprocess(cfg)
    psi = hjb_check.psi_field_from_g(hp.fk.g, grid)
    res_exp = hjb_check.discrete_hjb_residual(psi, model, hp.V,
                                              time_term="exponential")
    res_log = hjb_check.discrete_hjb_residual(psi, model, hp.V,
                                              time_term="log")
    rows = ((t, x, res_exp.residual[k, x], res_log.residual[k, x])
            for k, t in enumerate(grid.nodes) for x in range(model.n)
            if res_exp.defined[k, x])
    write_csv(os.path.join(args.out, "hjb.csv"),
              ["t", "state", "residual_exponential", "residual_log"], rows,
              meta={"grid_N": grid.N})
    write_text(os.path.join(args.out, "hjb_summary.txt"),
               ["time_term=exponential", res_exp.report().rstrip(),
                "time_term=log", res_log.report().rstrip()])
    _say(args, f"hjb residuals: exp max={res_exp.max_residual:.3e}, "
               f"log max={res_log.max_residual:.3e}")
    return EXIT_OK


def cmd_bridge(cfg: RunConfig, args) -> int:
    model = _jump_model(cfg)
    sec = cfg.bridge
    if "mu0" not in sec or "mu1" not in sec:
        raise ModelValidationError("bridge section needs mu0 and mu1",
                                   reason="bad_config")
    problem = bridge_mod.build_bridge_problem(model, sec["mu0"], sec["mu1"])
    tol = float(sec.get("tol", bridge_mod.DEFAULT_TOL))
    max_iter = int(sec.get("max_iter", bridge_mod.DEFAULT_MAX_ITER))
    result = bridge_mod.ipf_solve(problem, tol=tol, max_iter=max_iter)
    write_csv(os.path.join(args.out, "bridge_convergence.csv"),
              ["iteration", "error"],
              ((i + 1, e) for i, e in enumerate(result.error_history)),
              meta={"tol": tol})
    write_csv(os.path.join(args.out, "bridge_multipliers.csv"),
              ["state", "f0", "gamma1"],
              ((x, result.f0[x], result.gamma1[x]) for x in range(model.n)))
    entropy = bridge_mod.static_entropy(problem, result.f0, result.gamma1)
    write_text(os.path.join(args.out, "bridge_summary.txt"),
               [f"iterations={result.iterations}",
                f"final_error={result.final_error!r}",
                f"support_restricted={result.support_restricted}",
                f"static_entropy={entropy!r}"])
    _say(args, f"bridge converged in {result.iterations} iterations")
    return EXIT_OK


def cmd_diffusion(cfg: RunConfig, args) -> int:
    model = build_model_from_config(cfg)
    if not isinstance(model, diffusion1d.Diffusion1DModel):
        raise ModelValidationError(
            "this subcommand needs model.kind: diffusion",
            reason="wrong_model_kind")
    grid = cfg.time_grid
    f0, gamma1, V = transform_pieces(cfg, model, grid)
    tr = diffusion1d.build_diffusion_transform(model, V, f0, gamma1, grid)
    times = [float(t) for t in cfg.checks.get("times", [0.0, 0.25, 0.5, 0.75])]
    indices = [grid.node_index(t) for t in times]
    for name, gf in [("diffusion_g.csv", tr.g), ("diffusion_f.csv", tr.f),
                     ("diffusion_drift.csv", tr.drift)]:
        write_csv(os.path.join(args.out, name), ["t", "x", "value"],
                  diffusion_rows(times, model.xs,
                                 [gf.values[k] for k in indices]),
                  meta={"grid_N": grid.N, "M": model.M})
    lines = [f"normalization_c={tr.c!r}",
             f"clipped_nodes={tr.clipped_nodes}"]
    if cfg.seed is not None and "n_paths" in cfg.sampling:
        tv = diffusion1d.empirical_vs_fk_marginal(
            tr, float(cfg.sampling.get("t", 0.5)),
            int(cfg.sampling["n_paths"]), cfg.require_seed())
        lines.append(f"empirical_tv={tv!r}")
    write_text(os.path.join(args.out, "diffusion_summary.txt"), lines)
    _say(args, "diffusion pipeline done")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    results = _run_checks(cfg, args)
    if "mu0" in cfg.bridge and "mu1" in cfg.bridge:
        model = _jump_model(cfg)
        problem = bridge_mod.build_bridge_problem(model, cfg.bridge["mu0"],
                                                  cfg.bridge["mu1"])
        tol = float(cfg.bridge.get("tol", bridge_mod.DEFAULT_TOL))
        try:
            result = bridge_mod.ipf_solve(
                problem, tol=tol,
                max_iter=int(cfg.bridge.get("max_iter",
                                            bridge_mod.DEFAULT_MAX_ITER)))
            results.append(("bridge_convergence", True,
                            f"iterations={result.iterations}"))
        except (ConvergenceError, InconsistencyError) as exc:
            results.append(("bridge_convergence", False, f"reason={exc.reason}"))
    return _write_check_report(results, args.out, "report.txt")


_COMMANDS = {
    "model": cmd_model,
    "fk": cmd_fk,
    "transform": cmd_transform,
    "sample": cmd_sample,
    "check": cmd_check,
    "hjb": cmd_hjb,
    "bridge": cmd_bridge,
    "diffusion": cmd_diffusion,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads < 1:
        print("error: reason=bad_config: --threads must be >= 1",
              file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"error: reason=missing_file: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, InconsistencyError) as exc:
        print(f"error: reason={exc.reason}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except HTLabError as exc:
        print(f"error: reason={exc.reason}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
