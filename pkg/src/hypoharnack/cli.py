"""Command-line experiment runner.

Subcommands: run, sweep, print-defaults, validate-config.  Every campaign
writes a manifest, JSON reports with sorted keys and RFC-4180 CSV traces.
Outputs carry no timestamps or timings, so identical configs reproduce
identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_defaults, load, load_dict
from .reports import _clean

log = logging.getLogger("hypoharnack")

ENV_OUT = "HYPOHARNACK_OUT"


def write_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _cell(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    if isinstance(x, (np.floating, np.integer)):
        return _cell(x.item())
    return x


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


# --- campaigns ----------------------------------------------------------------
# each returns (headline name, headline value, passed, artifacts {filename: text})


def campaign_kernel(cfg: ExperimentConfig):
    from .kolmogorov import validate_kernel

    k = cfg.section("kernel")
    acc = cfg.section("acceptance")
    rep = validate_kernel(tuple(k["levels"]), tuple(k["taus"]))
    runtime = rep.pop("runtime_s")
    log.info("kernel validation took %.2f s", runtime)
    passed = rep["max_normalization_error"] <= acc["normalization_tol"] and rep["observed_order"] >= acc["min_order"]
    rep["passed"] = bool(passed)
    return "observed_order", rep["observed_order"], passed, {"kernel_report.json": dump_json(rep)}


def campaign_hypothesis1(cfg: ExperimentConfig):
    from .kolmogorov import probe_hypothesis1

    h = cfg.section("hypothesis1")
    ex = cfg.exponents
    rep = probe_hypothesis1(ex["p1"], ex["gamma0"], ex["gamma1"], h["trials"], cfg.grid(), h["levels"], cfg.seed)
    passed = rep.details["relative_change"] <= cfg.section("acceptance")["h1_change"]
    rep.passed = bool(passed)
    csv_text = write_csv(rep.trials, ["level", "trial", "ratio"])
    return "C0", rep.lhs, passed, {"hypothesis1.json": dump_json(rep.to_dict()), "hypothesis1_trials.csv": csv_text}


def campaign_dual(cfg: ExperimentConfig):
    from .kolmogorov import probe_dual_spreading

    d = cfg.section("dual")
    rep = probe_dual_spreading(d["eta"], cfg.exponents["p2"], d["R"], d["trials"], cfg.grid(), cfg.seed)
    cols = ["level", "trial", "fraction", "mu0", "l1", "l1_per_measure", "w_p2", "dvw_p2"]
    return "mu0", rep.lhs, bool(rep.passed), {"dual_spreading.json": dump_json(rep.to_dict()), "dual_trials.csv": write_csv(rep.trials, cols)}


def sup_cases(cfg: ExperimentConfig, grid):
    """The smooth case and ``cases`` random cellwise coefficient fields with Lam/lam as configured."""
    from .rough_solver import evolve, make_coefficients

    sb = cfg.section("sup_bound")
    rng = np.random.default_rng(cfg.seed)
    recipes = [("smooth", {"kind": "identity"}, (0.0, 0.0))]
    for i in range(sb["cases"]):
        seed = int(rng.integers(2**31))
        centre = tuple(rng.uniform(-0.4, 0.4, 2))
        recipes.append((f"random_{i}", {"kind": "random", "lam": 1.0, "Lam": sb["Lam_ratio"], "seed": seed}, centre))
    out = []
    _, x, v = grid.mesh()
    for name, recipe, (cx, cv) in recipes:
        co = make_coefficients(recipe, grid)
        u0 = np.exp(-((x[0] - cx) ** 2 + (v[0] - cv) ** 2) / sb["width"])
        u = evolve(co, u0, boundary=np.zeros(grid.shape)).values
        out.append((name, co, u))
    return out


def campaign_sup(cfg: ExperimentConfig):
    from .degiorgi import fit_sup_constants, supremum_bound
    from .geometry import Cylinder, PhasePoint

    base = PhasePoint.origin()
    (s, r), (S, R) = cfg.section("cylinders")["inner"], cfg.section("cylinders")["outer"]
    inner, outer = Cylinder(base, s, r), Cylinder(base, S, R)
    acc = cfg.section("acceptance")
    beta = cfg.section("sup_bound")["beta"]
    rows, artifacts = [], {}
    passed = True
    for level, grid in enumerate((cfg.grid(), cfg.grid().refine(2))):
        for name, co, u in sup_cases(cfg, grid):
            res = supremum_bound(u, co, inner, outer, cfg.exponents, beta=beta)
            over = res.sup_estimate / res.true_max if res.true_max > 0 else math.inf
            ok = res.converged and res.invariants_ok and res.sound and res.sup_estimate >= res.true_max and over <= acc["sup_overshoot"]
            passed &= ok
            rows.append(
                {"case": name, "level": level, "D": res.D, "N": res.N, "delta_S": res.delta_S, "C_S": res.C_S,
                 "sup_estimate": res.sup_estimate, "true_max": res.true_max, "overshoot": over,
                 "invariants_ok": res.invariants_ok, "passed": ok}
            )
            artifacts[f"trace_{name}_L{level}.csv"] = res.trace_csv()
    stab = {}
    for name in {r["case"] for r in rows}:
        a, b = (r["C_S"] for r in sorted((r for r in rows if r["case"] == name), key=lambda r: r["level"]))
        stab[name] = abs(b - a) / a
    passed &= max(stab.values()) <= acc["cs_stability"]
    fine = [r for r in rows if r["level"] == 1]
    C_S, beta_fit = fit_sup_constants([r["delta_S"] for r in fine], [r["D"] for r in fine])
    cols = ["case", "level", "D", "N", "delta_S", "C_S", "sup_estimate", "true_max", "overshoot", "invariants_ok", "passed"]
    artifacts["sup_bound.csv"] = write_csv(rows, cols)
    summary = {"cs_relative_change": stab, "fit": {"C_S": C_S, "beta": beta_fit}, "passed": bool(passed)}
    artifacts["sup_bound.json"] = dump_json(summary)
    return "C_S", C_S, bool(passed), artifacts


def campaign_harnack(cfg: ExperimentConfig):
    from .harnack import gaussian_supersolution, weak_harnack
    from .rough_solver import make_coefficients

    h = cfg.section("harnack")
    grid = cfg.grid()
    co = make_coefficients(cfg.section("coefficients"), grid)
    u, _ = gaussian_supersolution(co, h["eta"], width=h["width"])
    cert = weak_harnack(u, co, eta=h["eta"], C_R=h["C_R"], beta=h["beta"], exponents=cfg.exponents, p2=cfg.exponents["p2"])
    sound = cert.mu <= cert.details["true_min"] * (1 + 1e-9)
    passed = cert.passed and cert.mu > 0 and sound
    return "mu", cert.mu, bool(passed), {"harnack_certificate.json": cert.to_json() + "\n"}


def viscosity_problem(cfg: ExperimentConfig):
    from .kolmogorov import SmoothProblem, radial_cutoff, random_bumps

    grid = cfg.grid()
    rng = np.random.default_rng(cfg.seed)
    _, x, v = grid.mesh()
    omega = np.broadcast_to(x**2 + v**2 < 1.5**2, grid.shape)
    G = random_bumps(grid, rng, 3, 0.8)
    F = random_bumps(grid, rng, 3, 0.8)
    return SmoothProblem(grid, G, F, domain=omega), radial_cutoff(grid, 1.5, 2.5)


def campaign_convergence(cfg: ExperimentConfig):
    from .kolmogorov import viscosity_sweep

    pb, chi = viscosity_problem(cfg)
    rep = viscosity_sweep(pb, chi, tuple(cfg.section("convergence")["eps_values"]))
    cols = ["eps", "l2", "grad_v", "ext_grad", "visc_grad", "dist_to_limit"]
    return "cauchy_last", rep.lhs, bool(rep.passed), {"convergence.json": dump_json(rep.to_dict()), "convergence.csv": write_csv(rep.trials, cols)}


CAMPAIGNS = {
    "kernel-validate": campaign_kernel,
    "hypothesis1": campaign_hypothesis1,
    "dual-spreading": campaign_dual,
    "sup-bound": campaign_sup,
    "weak-harnack": campaign_harnack,
    "convergence": campaign_convergence,
}


# --- orchestration --------------------------------------------------------------


def manifest(cfg: ExperimentConfig) -> dict:
    import scipy
    import yaml

    return {
        "config": cfg.to_dict(),
        "versions": {
            "hypoharnack": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pyyaml": yaml.__version__,
        },
    }


def run(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(dump_json(manifest(cfg)), encoding="utf-8")
    name, value, passed, artifacts = CAMPAIGNS[cfg.campaign](cfg)
    for fname, text in sorted(artifacts.items()):
        (out / fname).write_bytes(text.encode("utf-8"))
    summary = {"campaign": cfg.campaign, "headline": {name: value}, "passed": bool(passed)}
    (out / "summary.json").write_text(dump_json(summary), encoding="utf-8")
    print(f"{cfg.campaign}: {name} = {value:.6g} -> {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def _sweep_one(args):
    cfg_data, axis, value = args
    try:
        cfg = load_dict(cfg_data).with_value(axis, value)
        name, head, passed, _ = CAMPAIGNS[cfg.campaign](cfg)
        return {"value": value, "statistic": name, "headline": head, "passed": bool(passed), "error": ""}
    except Exception as exc:  # a failing value must not abort the sweep
        return {"value": value, "statistic": "", "headline": math.nan, "passed": False, "error": f"{type(exc).__name__}: {exc}"}


# statistics whose monotone direction along the sweep is claimed
MONOTONE = {("weak-harnack", "coefficients.Lam"): "nonincreasing", ("weak-harnack", "harnack.eta"): "nondecreasing",
            ("dual-spreading", "dual.eta"): "nondecreasing"}


def sweep(cfg: ExperimentConfig, axis: str, values: list, out: Path, jobs: int = 1) -> int:
    try:
        current = cfg.get(axis)
    except (KeyError, TypeError):
        raise ConfigError(axis, "sweep axis is not a config field") from None
    if isinstance(current, bool) or not isinstance(current, (int, float)):
        raise ConfigError(axis, "sweep axis must be numeric")
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg.to_dict(), axis, v) for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    direction = MONOTONE.get((cfg.campaign, axis))
    heads = [r["headline"] for r in rows]
    monotone = None
    if direction and len(heads) > 1:
        pairs = list(zip(heads, heads[1:]))
        monotone = all(b <= a for a, b in pairs) if direction == "nonincreasing" else all(b >= a for a, b in pairs)
    stem = f"sweep_{axis.replace('.', '_')}"
    (out / f"{stem}.csv").write_bytes(write_csv(rows, ["value", "statistic", "headline", "passed", "error"]).encode("utf-8"))
    meta = {"campaign": cfg.campaign, "axis": axis, "values": list(values), "direction": direction, "monotone": monotone}
    (out / f"{stem}.json").write_text(dump_json(meta), encoding="utf-8")
    ok = all(r["passed"] for r in rows) and monotone is not False
    print(f"sweep {axis} over {len(values)} values -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _parse_values(text: str) -> list:
    vals = []
    for part in text.split(","):
        part = part.strip()
        if part:
            f = float(part)
            vals.append(int(f) if f.is_integer() and "." not in part and "e" not in part.lower() else f)
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypoharnack", description="Numerical checks of kinetic positivity estimates.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", type=Path)

    common(sub.add_parser("run", help="run the configured campaign"), config_required=False)
    sw = sub.add_parser("sweep", help="rerun the campaign over values of one numeric field")
    common(sw, config_required=False)
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help="comma separated list (may be empty)")
    sub.add_parser("print-defaults", help="print the default configuration")
    vc = sub.add_parser("validate-config", help="check a config file")
    vc.add_argument("--config", type=Path, required=True)
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load(args.config) if args.config else load_dict({})
    if args.seed is not None:
        cfg = cfg.with_value("seed", args.seed)
    if args.jobs is not None:
        cfg = cfg.with_value("jobs", args.jobs)
    out = os.environ.get(ENV_OUT) or args.out or cfg.data["output_dir"]
    return cfg, Path(out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "print-defaults":
            sys.stdout.write(dump_defaults())
            return 0
        if args.command == "validate-config":
            cfg = load(args.config)
            print(f"ok: campaign {cfg.campaign}")
            return 0
        cfg, out = _resolve(args)
        if args.command == "run":
            return run(cfg, out)
        return sweep(cfg, args.axis, _parse_values(args.values), out, jobs=max(1, args.jobs))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
