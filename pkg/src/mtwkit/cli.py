"""Command-line front end.

One JSON problem file drives ``check``, ``solve`` and ``oracle``;
``classify`` takes its range on the command line.  Exit codes: 0 success,
1 domain-level failure (a report is still written), 2 usage or schema error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import condition_checks as cc
from . import duality, geometry
from .cost_models import COST_IDS, cost_from_spec
from .diagnostics import cost_value, diagnose
from .errors import BadGeometry, ContinuationStall, MTWError, SchemaError
from .pde_solver import Schedule, continuation_solve, make_problem

log = logging.getLogger(__name__)

DEFAULT_M = (-3.0, -2.0, -1.0, 0.0, 0.5, 2.0, 3.0)
THRESHOLD_RTOL = 0.05

_POLY = {"oneOf": [{"type": "number"},
                   {"type": "object", "required": ["terms"],
                    "properties": {"terms": {"type": "array", "items": {
                        "type": "array", "minItems": 2, "maxItems": 2}}}}]}
_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_DOMAIN = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(geometry.KINDS)},
        "h": {"type": "number", "exclusiveMinimum": 0},
        "center": _VEC,
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "lo": {"type": "number"},
        "hi": {"type": "number"},
        "semi_axes": _VEC,
        "points": {"type": "array", "items": _VEC},
        "defining": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    },
}
PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["cost", "domains"],
    "properties": {
        "cost": {
            "type": "object",
            "required": ["id"],
            "properties": {
                "id": {"enum": list(COST_IDS)},
                "params": {"type": "object"},
                "derivative_mode": {"enum": ["analytic", "finite_difference"]},
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
                "sep_min": {"type": "number", "minimum": 0},
                "margin": {"type": "number", "minimum": 0},
            },
        },
        "domains": {"type": "object", "required": ["source", "target"],
                    "properties": {"source": _DOMAIN, "target": _DOMAIN}},
        "densities": {"type": "object", "properties": {"f": _POLY, "g": _POLY}},
        "solver": {
            "type": "object",
            "properties": {
                "h": {"type": "number", "exclusiveMinimum": 0},
                "schedule": {"type": "object"},
                "tolerances": {"type": "object", "properties": {
                    "urbas": {"type": "number", "exclusiveMinimum": 0},
                    "balance": {"enum": ["rescale", "strict"]},
                    "rescale_limit": {"type": "number", "minimum": 0}}},
            },
        },
        "checks": {
            "type": "object",
            "properties": {
                "seed": {"type": "integer"},
                "conditions": {"type": "array", "items": {"enum": ["A1", "A2", "A3w"]}},
                "convexity": {"type": "boolean"},
                "resolutions": {"type": "object", "properties": {
                    "n_grid": {"type": "integer", "minimum": 1},
                    "n_quasi": {"type": "integer", "minimum": 0},
                    "n_frames": {"type": "integer", "minimum": 1}}},
            },
        },
        "oracle": {"type": "object", "properties": {
            "method": {"enum": ["exact_lp", "entropic"]},
            "eps": {"type": "number", "exclusiveMinimum": 0}}},
    },
}


@dataclass
class RunReport:
    command: str
    input_hash: str | None = None
    tool_version: str = __version__
    conditions: list = field(default_factory=list)
    convexity: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    diagnostics: dict | None = None
    oracle: dict | None = None
    status: str = "ok"
    messages: list = field(default_factory=list)

    def to_dict(self):
        return _jsonable(self.__dict__)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def _dump(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _table(rows, cols):
    cells = [[str(c) for c in cols]] + [["" if r.get(c) is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                                         for c in cols] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells) + "\n"


# --------------------------------------------------------------------------
# Problem ingestion

def load_problem(path) -> tuple[dict, str]:
    """Parsed, schema-checked problem document and the sha256 of its bytes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise SchemaError(f"cannot read problem file: {exc}") from exc
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, PROBLEM_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"schema violation at {list(exc.absolute_path)}: {exc.message}") from exc
    return doc, hashlib.sha256(raw).hexdigest()


def _build(doc, resolution=None):
    try:
        model = cost_from_spec(doc["cost"])
        h_default = doc.get("solver", {}).get("h", 0.1)
        doms = []
        for key in ("source", "target"):
            spec = dict(doc["domains"][key])
            if resolution:
                spec["h"] = 1.0 / resolution
            spec.setdefault("h", h_default)
            doms.append(geometry.build_domain(spec))
    except (ValueError, KeyError, TypeError, BadGeometry) as exc:
        raise SchemaError(f"invalid problem: {exc}") from exc
    return model, doms[0], doms[1]


def _problem(doc, model, omega, omega_star):
    dens = doc.get("densities", {})
    tol = doc.get("solver", {}).get("tolerances", {})
    try:
        return make_problem(model, omega, omega_star, dens.get("f", 1.0), dens.get("g", 1.0),
                            balance=tol.get("balance", "rescale"),
                            rescale_limit=tol.get("rescale_limit", 0.05))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def _box(domain):
    nodes = domain.nodes
    return np.stack([nodes.min(axis=0), nodes.max(axis=0)], axis=-1)


# --------------------------------------------------------------------------
# Commands

def cmd_check(doc, input_hash, out: Path, seed=None, resolution=None) -> tuple[RunReport, int]:
    """Structural conditions on the cost and c-convexity of the domains."""
    model, omega, omega_star = _build(doc)
    chk = doc.get("checks", {})
    seed = chk.get("seed", 0) if seed is None else seed
    res = dict(chk.get("resolutions", {}))
    if resolution:
        res["n_grid"] = resolution
    region = cc.SampleRegion(x_box=_box(omega), y_box=_box(omega_star), seed=seed,
                             separation_min=model.sep_min, **res)
    report = RunReport("check", input_hash)
    ok = True
    for name in chk.get("conditions", ["A1", "A2", "A3w"]):
        rep = getattr(cc, f"check_{name}")(model, region)
        report.conditions.append(rep.to_dict())
        ok &= rep.verdict == "holds"
    if chk.get("convexity", True):
        for fn in (geometry.check_uniform_c_convexity, geometry.check_uniform_cstar_convexity):
            rep = fn(model, omega, omega_star, seed=seed)
            report.convexity.append(rep.to_dict())
            ok &= rep.verdict.startswith("uniformly")
    report.status = "ok" if ok else "check_failed"
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "check_report.json", report.to_dict())
    rows = [{"check": r["condition"], "verdict": r["verdict"], "extremal": r["extremal_value"]}
            for r in report.conditions]
    rows += [{"check": f"convexity({r['which']})", "verdict": r["verdict"], "extremal": r["delta0_estimate"]}
             for r in report.convexity]
    text = _table(rows, ["check", "verdict", "extremal"]) + f"seed {seed}  resolution {res}\n"
    (out / "check_report.txt").write_text(text)
    print(text, end="")
    return report, 0 if ok else 1


def _write_field(path, problem, fld):
    nodes = problem.omega.nodes
    n = nodes.shape[1]
    header = [f"x{k}" for k in range(n)] + ["u", "abs_Du", "min_eig_w"] + [f"T{k}" for k in range(n)]
    gradn = np.linalg.norm(fld.Du, axis=-1)
    rows = (list(nodes[i]) + [fld.u[i], gradn[i], fld.eig_w[i]] + list(fld.T[i]) for i in range(len(nodes)))
    _write_csv(path, header, rows)


def cmd_solve(doc, input_hash, out: Path, force=False, seed=None, resolution=None):
    """Seed, continuation and diagnostics; checks gate the solve unless forced."""
    out.mkdir(parents=True, exist_ok=True)
    check, code = cmd_check(doc, input_hash, out, seed, None)
    report = RunReport("solve", input_hash, conditions=check.conditions, convexity=check.convexity)
    if code != 0 and not force:
        report.status = "check_failed"
        report.messages.append("structural checks failed; rerun with --force to solve anyway")
        _dump(out / "run_report.json", report.to_dict())
        return report, 1
    model, omega, omega_star = _build(doc, resolution)
    problem = _problem(doc, model, omega, omega_star)
    sol = doc.get("solver", {})
    try:
        result = continuation_solve(problem, Schedule.from_dict(sol.get("schedule")))
    except ContinuationStall as exc:
        report.trace = exc.trace or []
        report.status = "stalled"
        report.messages.append(str(exc))
    except MTWError as exc:
        report.status = type(exc).__name__
        report.messages.append(str(exc))
    else:
        report.trace = result.trace
        diag = diagnose(problem, result.field, urbas_tol=sol.get("tolerances", {}).get("urbas", 0.1))
        report.diagnostics = diag.to_dict()
        report.messages.append(f"seed {result.seed_kind}; final sigma {result.sigma:g}")
        report.status = "ok" if diag.passed else "diagnostics_failed"
        _write_field(out / "field.csv", problem, result.field)
        print(diag.summary())
    _dump(out / "trace.json", {"input_hash": input_hash, "trace": report.trace})
    if report.diagnostics is not None:
        _dump(out / "diagnostics.json", report.diagnostics)
    _dump(out / "run_report.json", report.to_dict())
    return report, 0 if report.status == "ok" else 1


def _read_field(path, n):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :n], data[:, n], data[:, n + 3:n + 3 + n]


def _interp(nodes, values, pts):
    if nodes.shape[1] == 1:
        order = np.argsort(nodes[:, 0])
        return np.interp(pts[:, 0], nodes[order, 0], values[order])
    from scipy.interpolate import griddata
    lin = griddata(nodes, values, pts, method="linear")
    miss = ~np.isfinite(lin)
    lin[miss] = griddata(nodes, values, pts[miss], method="nearest")
    return lin


def cmd_oracle(doc, input_hash, out: Path, seed=None, resolution=None):
    """Exact (or entropic) discrete dual on the node clouds of both domains."""
    model, omega, omega_star = _build(doc, resolution)
    problem = _problem(doc, model, omega, omega_star)
    fw = problem.f(omega.nodes) * omega.weights
    gw = problem.g(omega_star.nodes) * omega_star.weights
    src, tgt = duality.WeightedCloud(omega.nodes, fw), duality.WeightedCloud(omega_star.nodes, gw)
    opts = doc.get("oracle", {})
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport("oracle", input_hash)
    try:
        res = duality.solve_dual_discrete(model, src, tgt, method=opts.get("method", "exact_lp"),
                                          eps=opts.get("eps", 1e-2))
    except MTWError as exc:
        report.status = type(exc).__name__
        report.messages.append(str(exc))
        _dump(out / "oracle_report.json", report.to_dict())
        return report, 1
    n = omega.dim
    for name, cloud in (("source_cloud.csv", src), ("target_cloud.csv", tgt)):
        _write_csv(out / name, [f"x{k}" for k in range(n)] + ["weight"],
                   (list(p) + [w] for p, w in zip(cloud.points, cloud.weights)))
    pi = res.plan.coupling
    ii, jj = np.nonzero(pi > 0)
    _write_csv(out / "plan.csv", ["i", "j", "mass"], zip(ii, jj, pi[ii, jj]))
    _write_csv(out / "potential_u.csv", ["index", "value"], enumerate(res.potentials.u))
    _write_csv(out / "potential_v.csv", ["index", "value"], enumerate(res.potentials.v))
    oracle = {"info": res.info, "value": res.plan.value}
    field_csv = out / "field.csv"
    if field_csv.exists():
        nodes, u_pde, T = _read_field(field_csv, n)
        u_pde = _interp(nodes, u_pde, omega.nodes)
        T = np.stack([_interp(nodes, T[:, k], omega.nodes) for k in range(n)], axis=-1)
        w = omega.weights
        ul = res.potentials.u - np.average(res.potentials.u, weights=w)
        up = u_pde - np.average(u_pde, weights=w)
        pde_value = cost_value(model, fw, omega.nodes, T)
        cmp_ = {"potential_rel_linf": float(np.max(np.abs(up - ul)) / np.max(np.abs(ul))),
                "pde_cost_value": pde_value, "oracle_cost_value": res.plan.value,
                "cost_value_rel_gap": abs(pde_value - res.plan.value) / abs(res.plan.value)}
        oracle["comparison"] = cmp_
        _write_csv(out / "comparison.csv", ["quantity", "value"], sorted(cmp_.items()))
        print(_table([{"quantity": k, "value": v} for k, v in sorted(cmp_.items())], ["quantity", "value"]), end="")
    report.oracle = oracle
    _dump(out / "oracle_report.json", report.to_dict())
    return report, 0


def cmd_classify(m_list, signs, p_list, out: Path, seed=0, resolution=None):
    """Power-cost A3w verdicts and compound-cost thresholds against the known answers."""
    region = cc.power_region(seed=seed, **({"n_grid": resolution} if resolution else {}))
    rows = cc.classify_power_costs(m_list, signs, region) if m_list else []
    thresholds = []
    for p in p_list:
        t = cc.compound_threshold(p)
        exp = t["expected"]
        t["match"] = (t["threshold"] is not None and exp is not None
                      and abs(t["threshold"] - exp) <= THRESHOLD_RTOL * exp)
        thresholds.append(t)
    out.mkdir(parents=True, exist_ok=True)
    table = {"power": rows, "compound_thresholds": thresholds, "region": region.to_dict(),
             "seed": seed, "tool_version": __version__}
    _dump(out / "classify.json", table)
    text = _table(rows, ["m", "sign", "verdict", "expected", "match", "extremal_value"])
    if thresholds:
        text += "\n" + _table(thresholds, ["p", "threshold", "expected", "match", "min_over_scan"])
    text += f"seed {seed}  n_grid {region.n_grid}\n"
    (out / "classify.txt").write_text(text)
    print(text, end="")
    ok = all(r["match"] for r in rows) and all(t["match"] for t in thresholds)
    return table, 0 if ok else 1


# --------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtwkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="mtw_out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="sampling seed")
    common.add_argument("--resolution", type=int, default=None,
                        help="grid resolution (h = 1/resolution for domains, n_grid for checks)")
    for name, help_ in (("check", "structural conditions and convexity"),
                        ("solve", "continuation solve with diagnostics"),
                        ("oracle", "discrete LP oracle on the node clouds")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--input", required=True, help="problem JSON file")
        if name == "solve":
            p.add_argument("--force", action="store_true", help="solve even if checks fail")
    p = sub.add_parser("classify", parents=[common], help="power-cost A3w classification")
    p.add_argument("--m", type=float, nargs="*", default=list(DEFAULT_M), help="exponents m")
    p.add_argument("--signs", type=int, nargs="*", default=[1, -1], choices=[1, -1])
    p.add_argument("--p", type=float, nargs="*", default=[], help="compound exponents p in (1, 2]")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "classify":
            return cmd_classify(args.m, args.signs, args.p, out, seed=args.seed or 0,
                                resolution=args.resolution)[1]
        doc, digest = load_problem(args.input)
        if args.command == "check":
            return cmd_check(doc, digest, out, args.seed, args.resolution)[1]
        if args.command == "solve":
            return cmd_solve(doc, digest, out, args.force, args.seed, args.resolution)[1]
        return cmd_oracle(doc, digest, out, args.seed, args.resolution)[1]
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
