"""Command-line entry point.

Subcommands ``evolve``, ``perturb``, ``linearize``, ``gronwall``,
``validate-metric``, ``certify`` and ``sweep`` read an optional TOML run
configuration, execute one mode and write a run directory::

    config.resolved.toml   verbatim resolved configuration
    ledger.csv             per-step norms (one row per step)
    fields/                coefficient snapshots (.npy)
    summary.json           status and headline numbers
    certificates.json      measured constants against ceilings

Exit codes: 0 success, 1 usage or configuration error, 2 domain exit
(``BoundaryHit``/``GuardHit``), 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

from .analysis import (EnsembleSpec, certify_records, flow_of_trajectory, format_certificates,
                       lp_comparability, random_initial_data, run_member, transport_norm_check)
from .errors import ConfigError, NullFolError, ProfileError
from .evolution import (BOUNDARY_HIT, COMPLETED, GUARD_HIT, LEDGER_COLUMNS, EvolutionConfig,
                        evolve)
from .geometry import (PerturbationProfile, PerturbedMetric, SampleSpec, SchwarzschildParams,
                       validate_envelopes)
from .perturbation import evolve_pair, ledger_table, run_full
from .sphere import ScalarField, SphereGrid

MODES = ("evolve", "perturb", "linearize", "gronwall", "validate-metric", "certify", "sweep")
SWEEP_KEYS = ("epsilon", "delta_o", "delta_m", "d_o", "d_m", "data_seed", "profile_seed")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_CHECK = 0, 1, 2, 3

# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

_EVOLUTION_KEYS = {f.name for f in fields(EvolutionConfig)} - {"budgets"}
_ENSEMBLE_KEYS = {f.name for f in fields(EnsembleSpec)}


@dataclass
class RunConfig:
    """Resolved run configuration.

    Every section is a plain table so that the configuration round-trips
    through TOML unchanged.
    """

    mode: str = "evolve"
    geometry: dict = field(default_factory=lambda: {"r0": 1.0, "kappa": 0.5, "nlat": 48})
    profile: dict = field(default_factory=lambda: {"kind": "default", "epsilon": 0.01})
    initial: dict = field(default_factory=lambda: {"kind": "harmonics",
                                                   "coefficients": [[1, 0, 0.02]],
                                                   "mean": 0.0})
    perturbation: dict = field(default_factory=lambda: {"kind": "harmonics",
                                                        "coefficients": [[2, 0, 0.002]],
                                                        "mean": 0.0})
    evolution: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: {"cadence": 10})
    ensemble: dict = field(default_factory=dict)
    gronwall: dict = field(default_factory=lambda: {"m": 1, "p": 2.0})
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(extra))}")
        cfg = cls()
        for k, v in d.items():
            if k == "mode":
                if v not in MODES:
                    raise ConfigError(f"key 'mode': unknown mode {v!r}")
                cfg.mode = v
            else:
                if not isinstance(v, dict):
                    raise ConfigError(f"key '{k}': expected a table")
                base = dict(getattr(cfg, k))
                base.update(v)
                setattr(cfg, k, base)
        cfg.validate()
        return cfg

    def to_toml(self) -> str:
        return tomli_w.dumps(_plain(self.to_dict()))

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = _toml.loads(text)
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(data)

    # ------------------------------------------------------------------
    def validate(self):
        for k in self.evolution:
            if k not in _EVOLUTION_KEYS:
                raise ConfigError(f"key 'evolution.{k}' is not recognised")
        for k in self.ensemble:
            if k not in _ENSEMBLE_KEYS:
                raise ConfigError(f"key 'ensemble.{k}' is not recognised")
        for k in ("r0", "kappa", "nlat"):
            if k not in self.geometry:
                raise ConfigError(f"key 'geometry.{k}' is missing")
        try:
            self.evolution_config()
            self.params()
            self.ensemble_spec()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        try:
            self.make_profile()
        except ProfileError as exc:
            raise ConfigError(f"table 'profile': {exc}") from exc

    def params(self) -> SchwarzschildParams:
        return SchwarzschildParams(float(self.geometry["r0"]), float(self.geometry["kappa"]))

    def grid(self) -> SphereGrid:
        return SphereGrid(int(self.geometry["nlat"]))

    def make_profile(self) -> PerturbationProfile:
        d = dict(self.profile)
        if "path" in d:
            try:
                text = Path(d["path"]).read_text()
            except OSError as exc:
                raise ConfigError(f"key 'profile.path': {exc}") from exc
            return PerturbationProfile.from_toml(text)
        return PerturbationProfile.from_dict(d)

    def evolution_config(self) -> EvolutionConfig:
        d = dict(self.evolution)
        if "output_times" in d:
            d["output_times"] = tuple(d["output_times"])
        return EvolutionConfig(**d)

    def ensemble_spec(self) -> EnsembleSpec:
        d = dict(self.ensemble)
        d.setdefault("epsilon", float(self.profile.get("epsilon", 0.01)))
        d.setdefault("nlat", int(self.geometry["nlat"]))
        d.setdefault("r0", float(self.geometry["r0"]))
        d.setdefault("kappa", float(self.geometry["kappa"]))
        return EnsembleSpec.from_dict(d)


def _plain(obj):
    """Convert to TOML/JSON friendly builtins; ``None`` entries are dropped."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return obj


def _json_safe(obj):
    obj = _plain(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def leaf_from_spec(spec: dict, grid: SphereGrid, r0: float = 1.0, n: int = 2,
                   p: float = 2.0) -> ScalarField:
    """Leaf from an initial-data table.

    ``kind = "harmonics"``: ``coefficients = [[l, m, amp], ...]`` (amplitudes
    in units of ``r0``) plus ``mean``; ``kind = "constant"``: ``value``;
    ``kind = "random"``: ``seed``, ``grad_budget``, ``mean_budget``,
    ``order`` and ``lmax``.
    """
    kind = spec.get("kind", "harmonics")
    if kind == "constant":
        return ScalarField.constant(grid, float(spec.get("value", 0.0)) * r0)
    if kind == "harmonics":
        c = np.zeros(grid.coeff_shape)
        for row in spec.get("coefficients", []):
            try:
                l, m, a = int(row[0]), int(row[1]), float(row[2])
            except (TypeError, ValueError, IndexError) as exc:
                raise ConfigError(f"malformed harmonic row {row!r}") from exc
            if not (0 <= l <= grid.band and abs(m) <= l):
                raise ConfigError(f"harmonic ({l}, {m}) outside the band")
            c[1 if m < 0 else 0, l, abs(m)] += a * r0
        c[0, 0, 0] += float(spec.get("mean", 0.0)) * r0 * math.sqrt(4.0 * math.pi)
        return ScalarField.from_coeffs(grid, c)
    if kind == "random":
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        return random_initial_data(grid, rng, float(spec.get("grad_budget", 0.02)),
                                   float(spec.get("mean_budget", 0.1)),
                                   int(spec.get("order", n + 1)), p, r0,
                                   int(spec.get("lmax", 4)))
    raise ConfigError(f"unknown initial-data kind {kind!r}")


# ----------------------------------------------------------------------
# Artifacts
# ----------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: Path, columns, rows):
    """RFC-4180 CSV with a header row; floats as shortest round-trip decimals."""
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(Path(path), buf.getvalue())


def read_csv(path: Path):
    """Rows of a ledger CSV as dicts; empty cells are dropped."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "":
                    continue
                if v in ("true", "false"):
                    rec[k] = v == "true"
                elif k == "step":
                    rec[k] = int(v)
                else:
                    rec[k] = float(v)
            out.append(rec)
    return out


def write_json(path: Path, obj):
    _atomic_write(Path(path), json.dumps(_json_safe(obj), sort_keys=True, indent=2) + "\n")


def _rows_table(ledger):
    cols = []
    for row in ledger:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols, [[row.get(k) for k in cols] for row in ledger]


def _exit_for_status(status):
    return EXIT_DOMAIN if status in (BOUNDARY_HIT, GUARD_HIT) else EXIT_OK


def _save_fields(out: Path, name: str, series, cadence: int):
    d = out / "fields"
    d.mkdir(parents=True, exist_ok=True)
    last = len(series) - 1
    for i, f in enumerate(series):
        if f is None:
            continue
        if i % cadence == 0 or i == last:
            np.save(d / f"{name}_{i:05d}.npy", f.coeffs)


# ----------------------------------------------------------------------
# Modes
# ----------------------------------------------------------------------


def _setup(cfg: RunConfig):
    grid = cfg.grid()
    params = cfg.params()
    metric = PerturbedMetric(cfg.make_profile(), params, grid)
    ecfg = cfg.evolution_config()
    f0 = leaf_from_spec(cfg.initial, grid, params.r0, ecfg.n, ecfg.p)
    return grid, params, metric, ecfg, f0


def mode_evolve(cfg: RunConfig, out: Path) -> int:
    grid, params, metric, ecfg, f0 = _setup(cfg)
    traj = evolve(metric, f0, ecfg)
    write_csv(out / "ledger.csv", LEDGER_COLUMNS,
              [[row.get(k) for k in LEDGER_COLUMNS] for row in traj.ledger])
    _save_fields(out, "f", [st.f for st in traj.states], int(cfg.output.get("cadence", 10)))
    last = traj.ledger[-1]
    write_json(out / "summary.json", {"mode": "evolve", "status": traj.status,
                                      "steps": len(traj.states) - 1, "s_final": traj.final.s,
                                      "final": last, "epsilon": metric.epsilon})
    return _exit_for_status(traj.status)


def _second_leaf(cfg, grid, params, ecfg, f0):
    d = leaf_from_spec(cfg.perturbation, grid, params.r0, ecfg.n, ecfg.p)
    return ScalarField.from_coeffs(grid, f0.coeffs + d.coeffs)


def mode_perturb(cfg: RunConfig, out: Path, linearize=False) -> int:
    grid, params, metric, ecfg, f0 = _setup(cfg)
    f2 = _second_leaf(cfg, grid, params, ecfg, f0)
    if linearize:
        run = run_full(metric, f0, f2, ecfg, variation=bool(cfg.output.get("variation", False)))
    else:
        run = evolve_pair(metric, f0, f2, ecfg)
    cols, rows = ledger_table(run)
    write_csv(out / "ledger.csv", cols, rows)
    cad = int(cfg.output.get("cadence", 10))
    _save_fields(out, "delta_f", run.delta_f, cad)
    if run.lin_delta_f is not None:
        _save_fields(out, "lin_delta_f", run.lin_delta_f, cad)
        _save_fields(out, "err_f", run.err_f, cad)
    if run.variation is not None:
        _save_fields(out, "variation", run.variation, cad)
    write_json(out / "summary.json", {"mode": cfg.mode, "status": run.status,
                                      "steps": len(run.s) - 1, "initial": run.initial,
                                      "f2_constant": run.f2_constant, "reports": run.reports,
                                      "epsilon": metric.epsilon})
    return _exit_for_status(run.status)


def mode_gronwall(cfg: RunConfig, out: Path) -> int:
    grid, params, metric, ecfg, f0 = _setup(cfg)
    traj = evolve(metric, f0, ecfg)
    if traj.status != COMPLETED:
        write_json(out / "summary.json", {"mode": "gronwall", "status": traj.status})
        return EXIT_DOMAIN
    g = cfg.gronwall
    m, p = int(g.get("m", 1)), float(g.get("p", 2.0))
    c_ceiling = float(g.get("c_ceiling", 4.0))
    rep = transport_norm_check(metric, traj, m, p, float(g.get("k_ceiling", 1.0)), c_ceiling)
    flow = flow_of_trajectory(traj, sign=-1.0)
    lp = lp_comparability(flow, ScalarField(grid, grid.synthesis_laplacian(f0.coeffs)), p)
    write_csv(out / "ledger.csv", ["s", "u_norm", "bound_base", "lp_ratio"],
              [[s, a, b, r] for s, a, b, r in zip(rep.s, rep.norms, rep.bound_base, lp["ratio"])])
    comm_ok = rep.commutator_residual <= 1e-6 * max(rep.u_scale, 1e-300)
    cert = {"theorem": "transport", "constants": {"c": rep.c_measured, "prefactor": rep.prefactor,
                                                  "k": rep.k},
            "ceilings": {"c": c_ceiling}, "status": "pass" if rep.passed else "fail",
            "empirical_ceiling": True}
    write_json(out / "certificates.json", [cert])
    write_json(out / "summary.json", {
        "mode": "gronwall", "status": traj.status, "k_bound": flow.k_bound,
        "volume_agreement": flow.agreement, "lp_within": lp["within"],
        "lp_method_gap": lp["method_gap"], "commutator_residual": rep.commutator_residual,
        "commutator_ok": comm_ok, "tracking_error": rep.extra["tracking_error"]})
    ok = rep.passed and lp["within"] and comm_ok and flow.agreement <= 1e-6
    return EXIT_OK if ok else EXIT_CHECK


def mode_validate(cfg: RunConfig, out: Path) -> int:
    profile = cfg.make_profile()
    rep = validate_envelopes(profile, cfg.params(), SampleSpec())
    write_json(out / "summary.json", {"mode": "validate-metric", **rep.to_dict()})
    if not rep.passed:
        for name in rep.failures:
            print(f"violated: {name} (ratio {rep.ratios[name]:.3g})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def spec_hash(spec: EnsembleSpec, index: int) -> str:
    """Content hash of one ensemble member (the run count does not enter)."""
    d = spec.to_dict()
    d.pop("n_runs")
    d["index"] = index
    text = json.dumps(_json_safe(d), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _member_job(args):
    spec_dict, index, run_dir = args
    spec = EnsembleSpec.from_dict(spec_dict)
    rec = run_member(spec, index)
    _write_member(Path(run_dir), spec, rec)
    return run_dir


def _write_member(run_dir: Path, spec: EnsembleSpec, rec: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "config.resolved.toml",
                  tomli_w.dumps(_plain({"ensemble": spec.to_dict(), "index": rec["index"]})))
    cols, rows = _rows_table(rec["ledger"])
    write_csv(run_dir / "ledger.csv", cols, rows)
    summary = {k: v for k, v in rec.items() if k != "ledger"}
    write_json(run_dir / "summary.json", summary)


def _load_member(run_dir: Path) -> dict:
    rec = json.loads((run_dir / "summary.json").read_text())
    rec["ledger"] = read_csv(run_dir / "ledger.csv") if (run_dir / "ledger.csv").exists() else []
    return rec


def run_cells(cells, out: Path, workers: int = 1):
    """Execute every member of every cell once, reusing completed run directories.

    Returns one list of records per cell, loaded back from the run
    directories so that aggregates are recomputed from the CSV ledgers.
    """
    jobs, seen, layout = [], set(), []
    for spec in cells:
        dirs = []
        for i in range(spec.n_runs):
            h = spec_hash(spec, i)
            d = out / "runs" / h[:16]
            dirs.append(d)
            if h in seen or (d / "summary.json").exists():
                seen.add(h)
                continue
            seen.add(h)
            jobs.append((spec.to_dict(), i, str(d)))
        layout.append(dirs)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_member_job, jobs))
    else:
        for job in jobs:
            _member_job(job)
    return [[_load_member(d) for d in dirs] for dirs in layout], len(jobs)


def _cert_exit(certs) -> int:
    if any(c.status == "fail" for c in certs):
        return EXIT_CHECK
    if any(c.status == "inconclusive" for c in certs):
        statuses = set().union(*(c.metadata.get("statuses", []) for c in certs))
        return EXIT_DOMAIN if statuses & {BOUNDARY_HIT, GUARD_HIT} else EXIT_CHECK
    return EXIT_OK


def mode_certify(cfg: RunConfig, out: Path, workers: int) -> int:
    spec = cfg.ensemble_spec()
    (records,), _ = run_cells([spec], out, workers)
    certs = certify_records(spec, records)
    write_json(out / "certificates.json", [c.to_dict() for c in certs])
    write_json(out / "summary.json", {"mode": "certify", "spec": spec.to_dict(),
                                      "runs": [r["index"] for r in records],
                                      "statuses": [r["status"] for r in records]})
    table = format_certificates(certs)
    _atomic_write(out / "certificates.txt", table + "\n")
    print(table)
    return _cert_exit(certs)


def parse_param(text: str):
    """``key=a:step:b`` (inclusive) or ``key=v`` into ``(key, values)``."""
    if "=" not in text:
        raise ConfigError(f"--param {text!r}: expected key=a:step:b")
    key, rng = text.split("=", 1)
    key = key.strip()
    if key not in SWEEP_KEYS:
        raise ConfigError(f"--param {text!r}: key must be one of {', '.join(SWEEP_KEYS)}")
    parts = rng.split(":")
    try:
        nums = [float(x) for x in parts]
    except ValueError as exc:
        raise ConfigError(f"--param {text!r}: {exc}") from exc
    if len(nums) == 1:
        vals = nums
    elif len(nums) == 3:
        a, step, b = nums
        if step <= 0:
            raise ConfigError(f"--param {text!r}: step must be positive")
        count = int(math.floor((b - a) / step + 1e-9)) + 1 if b >= a else 0
        vals = [round(a + i * step, 12) for i in range(count)]
    else:
        raise ConfigError(f"--param {text!r}: expected key=a:step:b")
    if key.endswith("seed"):
        vals = [int(v) for v in vals]
    return key, vals


def mode_sweep(cfg: RunConfig, out: Path, workers: int, params) -> int:
    base = cfg.ensemble_spec()
    grid = {}
    for k, v in cfg.sweep.get("params", {}).items():
        grid[k] = list(v)
    for k, v in params:
        grid[k] = v
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys))) if keys else []
    if any(len(grid[k]) == 0 for k in keys):
        combos = []
    cells = []
    for combo in combos:
        d = base.to_dict()
        d.update(dict(zip(keys, combo)))
        cells.append(EnsembleSpec.from_dict(d))
    record_sets, executed = run_cells(cells, out, workers)
    agg, all_certs = [], []
    for spec, recs in zip(cells, record_sets):
        certs = certify_records(spec, recs)
        all_certs.extend(certs)
        agg.append({"cell": {k: getattr(spec, k) for k in keys},
                    "runs": [spec_hash(spec, i)[:16] for i in range(spec.n_runs)],
                    "certificates": [c.to_dict() for c in certs]})
    write_json(out / "aggregate.json", {"keys": keys, "cells": agg, "executed": executed})
    write_json(out / "certificates.json", [c.to_dict() for c in all_certs])
    write_json(out / "summary.json", {"mode": "sweep", "cells": len(cells), "executed": executed,
                                      "base": base.to_dict()})
    rows = []
    for a in agg:
        for c in a["certificates"]:
            for name, val in c["constants"].items():
                rows.append([*(a["cell"][k] for k in keys), c["theorem"], name, val, c["status"]])
    write_csv(out / "aggregate.csv", [*keys, "theorem", "constant", "value", "status"], rows)
    return _cert_exit(all_certs) if all_certs else EXIT_OK


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nullfol", description="Incoming null hypersurfaces in "
                                 "perturbed Schwarzschild spacetimes.")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", type=Path, help="TOML run configuration")
    ap.add_argument("--out", type=Path, default=None, help="run directory")
    ap.add_argument("--workers", type=int, default=None,
                    help="parallel workers (default: $NULLFOL_WORKERS or 1)")
    ap.add_argument("--seed", type=int, default=None, help="initial-data seed")
    ap.add_argument("--param", action="append", default=[], metavar="K=A:STEP:B",
                    help="sweep axis, repeatable")
    ap.add_argument("--epsilon", type=float, default=None, help="override the profile epsilon")
    ap.add_argument("--profile", default=None,
                    help="profile kind: default, random, background or adversarial")
    ap.add_argument("--runs", type=int, default=None, help="ensemble size")
    return ap


def resolve_config(ns) -> RunConfig:
    if ns.config is not None:
        try:
            text = ns.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {ns.config}: {exc}") from exc
        cfg = RunConfig.from_toml(text)
    else:
        cfg = RunConfig()
    d = cfg.to_dict()
    d["mode"] = ns.mode
    if ns.profile is not None:
        d["profile"] = {"kind": ns.profile, "epsilon": d["profile"].get("epsilon", 0.01)}
    if ns.epsilon is not None:
        d["profile"]["epsilon"] = ns.epsilon
        d["ensemble"]["epsilon"] = ns.epsilon
    if ns.seed is not None:
        d["ensemble"]["data_seed"] = ns.seed
        if d["initial"].get("kind") == "random":
            d["initial"]["seed"] = ns.seed
    if ns.runs is not None:
        d["ensemble"]["n_runs"] = ns.runs
    return RunConfig.from_dict(d)


def run(argv=None) -> int:
    """Execute one subcommand and return its exit code."""
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        workers = ns.workers if ns.workers is not None else int(
            os.environ.get("NULLFOL_WORKERS", "1"))
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        params = [parse_param(p) for p in ns.param]
        cfg = resolve_config(ns)
    except (ConfigError, ValueError) as exc:
        print(f"nullfol: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = ns.out if ns.out is not None else Path("runs") / ns.mode
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.resolved.toml", cfg.to_toml())
    try:
        if cfg.mode == "evolve":
            return mode_evolve(cfg, out)
        if cfg.mode in ("perturb", "linearize"):
            return mode_perturb(cfg, out, linearize=cfg.mode == "linearize")
        if cfg.mode == "gronwall":
            return mode_gronwall(cfg, out)
        if cfg.mode == "validate-metric":
            return mode_validate(cfg, out)
        if cfg.mode == "certify":
            return mode_certify(cfg, out, workers)
        return mode_sweep(cfg, out, workers, params)
    except ConfigError as exc:
        print(f"nullfol: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NullFolError as exc:
        print(f"nullfol: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
