"""Perturbations of incoming null hypersurfaces.

Two foliations ``f1`` (background) and ``f2`` (perturbed) of the same
spacetime are evolved in lockstep; the perturbation is ``df = f2 - f1``.
The linearised perturbation ``bdf`` solves the linear system

.. math::

    \\partial_s \\overline{bdf} = 0, \\qquad
    \\partial_s u = X_1 \\cdot \\nabla u - \\overline{X_1 \\cdot \\nabla u},
    \\quad u = \\Delta\\, bdf,

with ``X_1`` the transport vector of ``f1``, and the error is
``er f = df - bdf``. The variation through solutions ``v`` obeys a different
linear equation and is provided for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LockstepViolation, NotMeanZero, OutOfDomain
from .evolution import (BOUNDARY_HIT, COMPLETED, EvolutionConfig, FoliationState, Trajectory,
                        _dot, _domain_status, _F_from, _Kin, _l2, _quad, _re_from, _recon,
                        _record, _rk4, _sample, _stage, _X_from)
from .geometry import PerturbedMetric
from .sphere import ScalarField, TangentField, covariant_derivatives

BUDGET_KEYS = ("epsilon", "delta_o", "delta_m", "d_o", "d_m")


@dataclass
class PerturbationRun:
    """A lockstep pair of foliations and the derived perturbation series.

    Attributes
    ----------
    f1, f2 : Trajectory
        Background and perturbed foliations.
    delta_f : list of ScalarField
        ``f2 - f1`` per step.
    lin_delta_f, err_f, variation : list of ScalarField or None
        Filled by :func:`evolve_linearised`, :func:`compute_error` and
        :func:`evolve_variation`.
    budgets : dict
        Configured budgets, keys :data:`BUDGET_KEYS`.
    initial : dict
        Measured norms of the initial data.
    ledger : list of dict
        One row per step.
    f2_constant : bool
        The perturbed leaf is a level set of ``us``; enables the order ``n+1``
        column for ``df``.
    """

    f1: Trajectory
    f2: Trajectory
    delta_f: list
    budgets: dict
    initial: dict
    ledger: list
    config: EvolutionConfig
    f2_constant: bool = False
    delta_F_mean: np.ndarray | None = None
    lin_delta_f: list | None = None
    err_f: list | None = None
    variation: list | None = None
    reports: dict = field(default_factory=dict)

    @property
    def s(self) -> np.ndarray:
        return self.f1.s

    @property
    def status(self) -> str:
        return self.f1.status

    def index(self, s: float) -> int:
        i = int(np.argmin(np.abs(self.s - s)))
        if abs(self.s[i] - s) > 1e-9 * max(1.0, abs(s)):
            raise KeyError(f"no step at s = {s}")
        return i


def _orders_norm(grid, ders, lo, hi, p):
    total = 0.0
    for T in ders[lo:hi + 1]:
        sq = np.sum(T.reshape(-1, *grid.shape) ** 2, axis=0)
        total += float(grid.integrate(sq ** (0.5 * p)))
    return total ** (1.0 / p)


def _grad_norms(f: ScalarField, n: int, p: float, top: int):
    """``{k: |grad f|_{W^{k,p}}}`` for ``k = n .. top`` from one derivative chain."""
    ders = covariant_derivatives(f, top + 1)
    return {k: _orders_norm(f.grid, ders, 1, k + 1, p) for k in range(n, top + 1)}


def _initial_norms(f1_0, f2_0, d0, n, p, r0):
    g1 = _grad_norms(f1_0, n + 1, p, n + 1)[n + 1]
    g2 = _grad_norms(f2_0, n + 1, p, n + 1)[n + 1]
    dd = _grad_norms(d0, n, p, n + 1)
    return {
        "delta_o": max(g1, g2) / r0,
        "delta_m": max(abs(f1_0.mean()), abs(f2_0.mean())) / r0,
        "d_o": dd[n] / r0,
        "d_o_np1": dd[n + 1] / r0,
        "d_m": abs(d0.mean()) / r0,
    }


def evolve_pair(metric: PerturbedMetric, f1_0: ScalarField, f2_0: ScalarField,
                cfg: EvolutionConfig | None = None, budgets: dict | None = None) -> PerturbationRun:
    """Evolve two foliations with one shared step sequence.

    Both leaves advance inside a single RK4 step, so the step sequence is
    common by construction and identical initial data give bitwise identical
    trajectories. The run stops for both members as soon as either leaves
    the domain.

    Parameters
    ----------
    metric : PerturbedMetric
    f1_0, f2_0 : ScalarField
        Initial background and perturbed leaves.
    cfg : EvolutionConfig
    budgets : dict, optional
        Configured ``(epsilon, delta_o, delta_m, d_o, d_m)``; echoed in the run.

    Returns
    -------
    PerturbationRun
        With ``f1``, ``f2``, ``delta_f`` and the ``df`` ledger columns filled.
    """
    cfg = cfg if cfg is not None else EvolutionConfig()
    grid = metric.grid
    if f1_0.grid != grid or f2_0.grid != grid:
        from .errors import GridMismatch
        raise GridMismatch("initial data live on a different grid")
    r0 = metric.params.r0
    c1 = grid.truncate(f1_0.coeffs)
    c2 = grid.truncate(f2_0.coeffs)
    pts = cfg.schedule(r0)

    def rhs(s, y, h):
        return (_stage(metric, cfg, s, y[0], h)[0], _stage(metric, cfg, s, y[1], h)[0])

    st1, st2, led1, led2 = [], [], [], []
    y = (c1, c2)
    status = COMPLETED
    for j in range(len(pts)):
        if j > 0:
            s, h = pts[j - 1], pts[j] - pts[j - 1]
            try:
                y = _rk4(rhs, y, s, h)
            except OutOfDomain:
                status = BOUNDARY_HIT
                break
        else:
            h = 0.0
        maxabs = max(float(np.max(np.abs(grid.synthesis(c)))) for c in y)
        st = _domain_status(metric, maxabs, cfg)
        if st == BOUNDARY_HIT:
            status = st
            if j == 0:
                bare = replace(cfg, diagnostics=False)
                _record(metric, st1, led1, 0, pts[0], 0.0, y[0], bare)
                _record(metric, st2, led2, 0, pts[0], 0.0, y[1], bare)
            break
        try:
            _record(metric, st1, led1, j, pts[j], h, y[0], cfg)
            _record(metric, st2, led2, j, pts[j], h, y[1], cfg)
        except OutOfDomain:
            status = BOUNDARY_HIT
            break
        if st is not None:
            status = st
            break
    if len(st2) < len(st1):
        st1.pop()
        led1.pop()
    f1 = Trajectory(st1, led1, status, cfg, "direct")
    f2 = Trajectory(st2, led2, status, cfg, "direct")

    f2_constant = bool(np.all(c2[:, 1:, :] == 0.0))
    delta = [ScalarField.from_coeffs(grid, a.coeffs - b.coeffs) for a, b in zip(st2, st1)]
    ledger, dF = [], []
    top = cfg.n + 1 if f2_constant else cfg.n
    for k, (a, b, d) in enumerate(zip(st1, st2, delta)):
        try:
            Fa = a.F_rhs if a.F_rhs is not None else _F_field(metric, a)
            Fb = b.F_rhs if b.F_rhs is not None else _F_field(metric, b)
            mdF = float(grid.mean(Fb.values - Fa.values))
        except OutOfDomain:
            mdF = math.nan
        dF.append(mdF)
        norms = _grad_norms(d, cfg.n, cfg.p, top)
        row = {"step": k, "s": a.s, "h": led1[k]["h"],
               "f1_mean": led1[k]["mean_f"], "f2_mean": led2[k]["mean_f"],
               "f1_max_abs": led1[k]["max_abs_f"], "f2_max_abs": led2[k]["max_abs_f"]}
        if "grad_norm" in led1[k]:
            row["f1_grad_norm"] = led1[k]["grad_norm"]
            row["f2_grad_norm"] = led2[k]["grad_norm"]
        elif k == 0:
            row["f1_grad_norm"] = _grad_norms(a.f, cfg.n + 1, cfg.p, cfg.n + 1)[cfg.n + 1]
            row["f2_grad_norm"] = _grad_norms(b.f, cfg.n + 1, cfg.p, cfg.n + 1)[cfg.n + 1]
        row.update({"dd_grad_norm": norms[cfg.n], "mean_dd_f": d.mean(),
                    "max_abs_dd_f": d.max_abs(), "mean_dd_F": mdF})
        if f2_constant:
            row["dd_grad_norm_np1"] = norms[cfg.n + 1]
        ledger.append(row)
    initial = _initial_norms(ScalarField.from_coeffs(grid, c1), ScalarField.from_coeffs(grid, c2),
                             ScalarField.from_coeffs(grid, c2 - c1), cfg.n, cfg.p, r0)
    initial["epsilon"] = metric.epsilon
    bud = {k: float(budgets[k]) for k in BUDGET_KEYS} if budgets else {}
    return PerturbationRun(f1, f2, delta, bud, initial, ledger, cfg, f2_constant, np.array(dF))


def _F_field(metric, state: FoliationState) -> ScalarField:
    kin = _Kin(metric.grid, state.f.coeffs)
    sample = _sample(metric, state.s, state.f.values, (0, 0))
    return ScalarField(metric.grid, _F_from(sample, kin.df))


def _FXre(metric, s, coeffs):
    kin = _Kin(metric.grid, coeffs, second=True)
    sample = _sample(metric, s, kin.f, (2, 2))
    return _F_from(sample, kin.df), _X_from(sample, kin.df), _re_from(sample, kin), kin


def dd_quantities(metric: PerturbedMetric, run: PerturbationRun, s: float) -> dict:
    """Differences ``dd_F``, ``dd_X``, ``dd_re`` of the graph-equation data at ``s``.

    Raises
    ------
    OutOfDomain
        If either leaf lies outside the domain.
    """
    i = run.index(s)
    a, b = run.f1.states[i], run.f2.states[i]
    F1, X1, re1, _ = _FXre(metric, a.s, a.coeffs)
    F2, X2, re2, _ = _FXre(metric, b.s, b.coeffs)
    g = metric.grid
    return {"dd_F": ScalarField(g, F2 - F1),
            "dd_X": TangentField.from_ambient(g, X2 - X1),
            "dd_re": ScalarField(g, re2 - re1)}


def dd_laplacian_residual(metric: PerturbedMetric, run: PerturbationRun, i: int) -> dict:
    """Compare a centred difference of ``lap df`` with the right side of its equation.

    The right side is ``X_1 . grad(lap df) + dd_X . grad(lap f2) + dd_re`` at
    step ``i``; the centred difference uses steps ``i - 1`` and ``i + 1``.
    """
    grid = metric.grid
    s = run.s
    if not 0 < i < len(s) - 1:
        raise IndexError("an interior step is required")
    a, b = run.f1.states[i], run.f2.states[i]
    _, X1, re1, k1 = _FXre(metric, a.s, a.coeffs)
    _, X2, re2, k2 = _FXre(metric, b.s, b.coeffs)
    rhs = _dot(X1, k2.dlap - k1.dlap) + _dot(X2 - X1, k2.dlap) + (re2 - re1)
    lap = [grid.synthesis_laplacian(d.coeffs) for d in run.delta_f[i - 1:i + 2]]
    hm, hp = s[i] - s[i - 1], s[i + 1] - s[i]
    fd = (hm * hm * lap[2] - hp * hp * lap[0] + (hp * hp - hm * hm) * lap[1]) / (hm * hp * (hm + hp))
    return {"fd": ScalarField(grid, fd), "rhs": ScalarField(grid, rhs),
            "max_residual": float(np.max(np.abs(fd - rhs))),
            "scale": float(np.max(np.abs(rhs)))}


def _check_lockstep(run, cfg, r0):
    pts = cfg.schedule(r0)
    s = run.s
    if len(pts) < len(s) or np.any(np.asarray(pts[:len(s)]) != s):
        raise LockstepViolation("configuration step sequence differs from the run")
    return pts[:len(s)]


def _joint(metric, run, cfg, y0, extra_rhs, post=None):
    """RK4 of ``(c1, w)`` with ``c1`` compared against the recorded ``f1`` each step."""
    r0 = metric.params.r0
    pts = _check_lockstep(run, cfg, r0)
    c1 = run.f1.states[0].coeffs

    def rhs(s, y, h):
        dc, kin, sample = _stage(metric, cfg, s, y[0], h)
        return (dc, extra_rhs(s, y, kin, sample))

    ws = [y0]
    y = (c1, y0)
    for j in range(1, len(pts)):
        s, h = pts[j - 1], pts[j] - pts[j - 1]
        y = _rk4(rhs, y, s, h)
        if post is not None:
            y = post(y)
        if not np.array_equal(y[0], run.f1.states[j].coeffs):
            raise LockstepViolation(f"background leaf diverged from the recorded run at step {j}")
        ws.append(y[1])
    return ws


def evolve_linearised(metric: PerturbedMetric, run: PerturbationRun,
                      cfg: EvolutionConfig | None = None) -> PerturbationRun:
    """Evolve the linearised perturbation alongside the background leaf.

    The Laplacian ``u`` of ``bdf`` is transported by ``X_1`` with its mean
    removed, the mean of ``bdf`` is held at its initial value and ``bdf`` is
    rebuilt from ``(mean, u)`` at every step.

    Raises
    ------
    LockstepViolation
        If the recomputed background leaf differs from ``run.f1``.
    NotMeanZero
        If ``u`` acquires a mean.
    """
    cfg = cfg if cfg is not None else run.config
    grid = metric.grid
    d0 = run.delta_f[0]
    c0 = d0.coeffs
    L = grid.band
    l = np.arange(L + 1, dtype=float)[:, None]
    u0 = -l * (l + 1.0) * c0
    m0 = d0.mean()

    def extra(s, y, kin, sample):
        u = y[1]
        if abs(u[0, 0, 0]) > 1e-10 * max(1.0, _l2(grid, u)):
            raise NotMeanZero("Laplacian of the linearised perturbation acquired a mean")
        X1 = _X_from(sample, kin.df)
        a, b = grid.synthesis_grad(u)
        du = grid.truncate(grid.analysis(_dot(X1, grid._frame_combine(a, b))))
        du[0, 0, 0] = 0.0
        return du

    def post(y):
        u = y[1].copy()
        u[0, 0, 0] = 0.0
        return y[0], u

    us = _joint(metric, run, cfg, u0, extra, post)
    lin = [d0]
    for u in us[1:]:
        c = _recon(grid, u, m0)
        # the mean is conserved exactly, so carry the l = 0 coefficient over bitwise
        c[0, 0, 0] = c0[0, 0, 0]
        lin.append(ScalarField.from_coeffs(grid, c))
    run.lin_delta_f = lin
    n, p = cfg.n, cfg.p
    for row, b, u in zip(run.ledger, lin, us):
        row["lin_grad_norm"] = _grad_norms(b, n, p, n)[n]
        row["mean_lin"] = b.mean()
        ders = covariant_derivatives(ScalarField.from_coeffs(grid, u), n)
        for m in range(n + 1):
            row[f"lap_lin_norm_{m}"] = _orders_norm(grid, ders, 0, m, p)
    return run


def evolve_variation(metric: PerturbedMetric, run: PerturbationRun,
                     cfg: EvolutionConfig | None = None) -> list:
    """Evolve the variation through solutions with coefficients frozen on ``f1``.

    .. math::

        \\partial_s v = -b \\cdot \\nabla v - (\\partial_{us} b \\cdot \\nabla f_1) v
        + 2 G(\\nabla f_1, \\nabla v) + \\partial_{us} G(\\nabla f_1, \\nabla f_1) v,

    with ``G = Omega^2 gslash^{-1}`` and every coefficient at ``us = f1``.

    Returns
    -------
    list of ScalarField
        ``v`` per step, starting from ``df(0)``.
    """
    cfg = cfg if cfg is not None else run.config
    grid = metric.grid

    def extra(s, y, kin, _):
        sample = _sample(metric, s, kin.f, (1, 0))
        v = grid.synthesis(y[1])
        a, b = grid.synthesis_grad(y[1])
        dv = grid._frame_combine(a, b)
        df1 = kin.df
        G = sample.inv
        out = (-_dot(sample.b[0][0], dv) - _dot(sample.b[1][0], df1) * v
               + 2.0 * _quad(G[0][0], df1, dv) + _quad(G[1][0], df1, df1) * v)
        return grid.truncate(grid.analysis(out))

    vs = _joint(metric, run, cfg, run.delta_f[0].coeffs, extra)
    run.variation = [ScalarField.from_coeffs(grid, v) for v in vs]
    for k, (row, v) in enumerate(zip(run.ledger, run.variation)):
        row["var_sup_diff_dd"] = float(np.max(np.abs(v.values - run.delta_f[k].values)))
        if run.lin_delta_f is not None:
            row["var_sup_diff_lin"] = float(np.max(np.abs(v.values - run.lin_delta_f[k].values)))
    return run.variation


def compute_error(run: PerturbationRun):
    """Form ``er f = df - bdf`` and check the evolution of its mean.

    Returns
    -------
    err : list of ScalarField
    report : dict
        ``mean_rate_residual`` is the largest gap between a second-order
        finite difference of ``mean er f`` and ``mean dd_F`` at interior
        steps, ``mean_rate_scale`` the largest ``|mean dd_F|``.
    """
    if run.lin_delta_f is None:
        raise ValueError("run the linearised evolution first")
    cfg = run.config
    n, p = cfg.n, cfg.p
    grid = run.delta_f[0].grid
    err = [ScalarField.from_coeffs(grid, d.coeffs - b.coeffs)
           for d, b in zip(run.delta_f, run.lin_delta_f)]
    err[0] = ScalarField.constant(grid, 0.0)
    run.err_f = err
    means = np.array([e.mean() for e in err])
    for row, e, m in zip(run.ledger, err, means):
        row["err_grad_norm"] = _grad_norms(e, n, p, n)[n]
        row["mean_err"] = float(m)
        row["max_abs_err"] = e.max_abs()
    s = run.s
    dF = run.delta_F_mean
    if len(s) >= 3:
        rate = np.gradient(means, s, edge_order=2)
        resid = float(np.max(np.abs(rate[1:-1] - dF[1:-1])))
    else:
        resid = 0.0
    report = {"mean_rate_residual": resid,
              "mean_rate_scale": float(np.max(np.abs(dF))) if len(dF) else 0.0,
              "err_at_zero": err[0].max_abs()}
    run.reports["error"] = report
    return err, report


def run_full(metric: PerturbedMetric, f1_0: ScalarField, f2_0: ScalarField,
             cfg: EvolutionConfig | None = None, budgets: dict | None = None,
             variation: bool = False) -> PerturbationRun:
    """Pair, linearisation and error in one call."""
    run = evolve_pair(metric, f1_0, f2_0, cfg, budgets)
    evolve_linearised(metric, run)
    compute_error(run)
    if variation:
        evolve_variation(metric, run)
    return run


def ledger_table(run: PerturbationRun):
    """Column names and rows of the run ledger, columns in first-seen order."""
    cols = []
    for row in run.ledger:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols, [[row.get(k, math.nan) for k in cols] for row in run.ledger]
