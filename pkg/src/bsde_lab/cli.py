"""Command-line front end: ``bsde-lab <command> [options]``.

Exit status is 0 when every check passes, 1 when any check fails (or a
``--check`` comparison finds a mismatch) and 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import shutil
import sys
import tempfile
from contextlib import nullcontext
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import COMMANDS, Scenario, load_config
from .errors import ConfigError, ConvergenceError, DomainError, NonFiniteError, PreconditionError, RegressionError
from .estimate import check_apriori_bound, class_d_diagnostic, supermartingale_test
from .report import VerificationReport, config_hash
from .scenario import brownian_terminal, eval_terminal, make_terminal, scaled_z_generator
from .solver import field_metadata, field_to_csv
from .special_functions import apriori_constant_C, growth_constant_K
from .sweeps import constant_q_moment, hjb_sweep, sandwich_sweep, young_sweep
from .uniqueness import delta_bound_audit, depth_cutoff, discrepancy_csv, linearize, subinterval_cascade, \
    uniqueness_experiment

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.json"
THREADS_ENV = "BSDE_LAB_THREADS"


class Artifacts:
    """Collects output files in memory until the run finishes."""

    def __init__(self):
        self.files: dict[str, bytes] = {}
        self.reports: list[VerificationReport] = []

    def add_text(self, name: str, text: str):
        self.files[name] = text.encode("utf-8")

    def add_report(self, rep: VerificationReport, scenario_hash: str):
        rep.scenario_hash = scenario_hash
        self.reports.append(rep)
        slug = re.sub(r"[^A-Za-z0-9]+", "_", rep.check_name).strip("_")
        self.add_text(f"reports/{len(self.reports):02d}_{slug}.json", rep.to_json() + "\n")


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def manifest_bytes(command: str, cfg_hash: str, seed, art: Artifacts, status: int) -> bytes:
    body = {"command": command, "config_hash": cfg_hash, "seed": seed, "exit_status": status,
            "checks": {r.check_name: bool(r.passed) for r in art.reports},
            "artifacts": {name: sha256(data) for name, data in sorted(art.files.items())}}
    return (json.dumps(body, sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_atomic(out_dir: Path, art: Artifacts, manifest: bytes) -> None:
    """Stage every file in a sibling temp dir, then rename each into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        items = dict(art.files)
        items[MANIFEST] = manifest
        for name, data in items.items():
            p = stage / name
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(data)
        for name in items:
            dest = out_dir / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / name, dest)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# --- commands ------------------------------------------------------------------

def run_verify_functions(sc: Scenario, art: Artifacts, h: str, negative: bool) -> None:
    v = sc["verify"]
    T = sc["horizon"]
    art.add_report(hjb_sweep(v["gammas"], v["anchors"], T, v["n_points"], v["x_max"]), h)
    art.add_report(sandwich_sweep(v["gammas"], v["anchors"], T, v["n_points"], v["x_max"]), h)
    base = 0 if sc.seed is None else sc.seed
    art.add_report(young_sweep(v["young_samples"], [base + i for i in range(v["young_seeds"])]), h)
    g = v["gammas"][0]
    t = 0.75 * T
    art.add_report(constant_q_moment(g, T, 0.5 / (4 * g * g * (T - t)), t, 100_000, base), h)
    art.add_report(constant_q_moment(g, T, 1.0 / (g * g * t), t, 100_000, base), h)
    consts = [{"gamma": gg, "K": growth_constant_K(gamma=gg, horizon=T),
               "C": apriori_constant_C(gamma=gg, beta=v["beta"], horizon=T)} for gg in v["gammas"]]
    art.add_text("constants.json", json.dumps({"horizon": T, "K_at_gamma_0": growth_constant_K(gamma=0, horizon=T),
                                               "constants": consts}, sort_keys=True, indent=2) + "\n")
    if negative:
        art.add_report(hjb_sweep(v["gammas"], v["anchors"], T, v["n_points"], v["x_max"], k_scale=0.5), h)


def _solve(sc: Scenario, method: Optional[str] = None, terminal=None, gen=None):
    ens = sc.ensemble()
    gen = gen or sc.generator()
    xi = eval_terminal(terminal or sc.terminal(), ens)
    return ens, gen, xi, sc.solver(method).solve(gen, xi, ens, meta={"config_hash": config_hash(sc.data)})


def run_solve(sc: Scenario, art: Artifacts, h: str, negative: bool) -> None:
    ens, gen, xi, field = _solve(sc)
    buf = _csv_text(field, sc["output"]["csv_max_paths"])
    art.add_text("field.csv", buf)
    art.add_text("field.json", field_metadata(field, h) + "\n")
    art.add_report(VerificationReport(f"solve[{gen.name}]", passed=bool(np.all(np.isfinite(field.y))),
                                      worst_margin=0.0, seed=sc.seed,
                                      details=[{"y0": field.y0, "y0_se": float(field.y_se[0]),
                                                "meta": field.meta}]), h)


def _csv_text(field, max_paths) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "f.csv"
        field_to_csv(field, p, max_paths=max_paths)
        return p.read_text(encoding="utf-8")


def run_estimate(sc: Scenario, art: Artifacts, h: str, negative: bool) -> None:
    e = sc["estimate"]
    ens, gen, xi, field = _solve(sc)
    params = sc.params()
    art.add_report(supermartingale_test(field, gen, e["anchor_index"], params), h)
    art.add_report(check_apriori_bound(field, gen, xi, params, max_violation_rate=e["max_violation_rate"]), h)
    art.add_report(class_d_diagnostic(field, params, e["thresholds"], fraction=e["class_d_fraction"]), h)
    if negative:
        bad = scaled_z_generator(3.0, params.gamma)
        xi4 = eval_terminal(brownian_terminal(4.0), ens)
        f2 = sc.solver().solve(bad, xi4, ens)
        rep = supermartingale_test(f2, bad, e["anchor_index"], params)
        rep.check_name = "negative_control:" + rep.check_name
        art.add_report(rep, h)


def run_uniqueness(sc: Scenario, art: Artifacts, h: str, negative: bool) -> None:
    u = sc["uniqueness"]
    ens = sc.ensemble()
    gen = sc.generator()
    term = sc.terminal()
    T = sc["horizon"]
    cascade = subinterval_cascade(T, depth_cutoff(T, u["depth"]))
    configs = (sc.solver(kind=u["kind"]), sc.solver(u["second_method"], kind=u["kind"]))
    if configs[0] == configs[1]:
        raise ConfigError("uniqueness needs solver.method != uniqueness.second_method")
    res = uniqueness_experiment(gen, term, ens, configs, cascade, abs_tol=u["abs_tol"])
    art.add_report(res.report, h)
    art.add_text("discrepancy.csv", discrepancy_csv(res.rows))
    f1, f2 = res.fields
    if "H2" in gen.class_tags:
        coeffs = linearize(gen, f1, f2)
        params = sc.params()
        for iv in cascade.float_intervals():
            art.add_report(delta_bound_audit(coeffs, f1, f2, iv, params, gen=gen), h)
    if negative:
        shifted = dict(sc["terminal"]["params"])
        shifted["shift"] = shifted.get("shift", 0.0) + 1.0
        term2 = make_terminal(sc["terminal"]["name"], shifted, sc.grid())
        neg = uniqueness_experiment(gen, term, ens, configs, cascade, abs_tol=u["abs_tol"], terminal2=term2)
        neg.report.check_name = "negative_control:" + neg.report.check_name
        art.add_report(neg.report, h)
        art.add_text("discrepancy_negative_control.csv", discrepancy_csv(neg.rows))


RUNNERS: dict[str, Callable] = {
    "verify-functions": run_verify_functions,
    "solve": run_solve,
    "estimate": run_estimate,
    "uniqueness": run_uniqueness,
}


def check_manifest(out_dir: Path) -> tuple[bool, list[str]]:
    """Recompute the hash of every artifact listed in the manifest."""
    mpath = out_dir / MANIFEST
    if not mpath.exists():
        return False, [f"no {MANIFEST} in {out_dir}"]
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    problems = []
    for name, digest in manifest["artifacts"].items():
        p = out_dir / name
        if not p.exists():
            problems.append(f"missing {name}")
        elif sha256(p.read_bytes()) != digest:
            problems.append(f"hash mismatch {name}")
    return not problems, problems


def run_report(out_dir: Path, check: bool, out=None) -> int:
    out = out or sys.stdout
    mpath = out_dir / MANIFEST
    if not mpath.exists():
        raise ConfigError(f"no {MANIFEST} in {out_dir}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    status = EXIT_PASS
    for name in sorted(manifest["artifacts"]):
        if name.startswith("reports/"):
            rep = VerificationReport.from_dict(json.loads((out_dir / name).read_text(encoding="utf-8")))
            print(rep.line(), file=out)
            if not rep.passed:
                status = EXIT_FAIL
    if check:
        ok, problems = check_manifest(out_dir)
        for p in problems:
            print(p, file=out)
        print("manifest OK" if ok else "manifest MISMATCH", file=out)
        if not ok:
            status = EXIT_FAIL
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsde-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="scenario TOML file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry, e.g. --set generator.gamma=0.5 (repeatable)")
    ap.add_argument("--output", default="bsde_lab_output", help="output directory")
    ap.add_argument("--seed", type=int, help="random seed (required for stochastic commands)")
    ap.add_argument("--check", action="store_true",
                    help="re-run and compare against the manifest already in --output instead of writing")
    ap.add_argument("--negative-controls", action="store_true",
                    help="also run deliberately broken variants, which must FAIL")
    return ap


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def execute(args: argparse.Namespace, out=None) -> int:
    out = out or sys.stdout
    out_dir = Path(args.output)
    if args.command == "report":
        return run_report(out_dir, args.check, out)
    sc = load_config(args.config, args.overrides, args.seed, need_seed=args.command != "verify-functions")
    h = config_hash(sc.data)
    art = Artifacts()
    n = _threads()
    with threadpool_limits(limits=n) if n else nullcontext():
        RUNNERS[args.command](sc, art, h, args.negative_controls)
    failed = any(not r.passed for r in art.reports)
    status = EXIT_FAIL if failed else EXIT_PASS
    for r in art.reports:
        print(r.line(), file=out)
    manifest = manifest_bytes(args.command, h, sc.seed, art, status)
    if args.check:
        mpath = out_dir / MANIFEST
        if not mpath.exists():
            print(f"no {MANIFEST} in {out_dir} to check against", file=out)
            return EXIT_FAIL
        same = mpath.read_bytes() == manifest
        print("manifest OK" if same else "manifest MISMATCH", file=out)
        return status if same else EXIT_FAIL
    write_atomic(out_dir, art, manifest)
    return status


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return execute(args)
    except (ConfigError, DomainError, PreconditionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, RegressionError, NonFiniteError, MemoryError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
