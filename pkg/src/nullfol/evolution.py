"""Evolution of an incoming null hypersurface written as a graph.

The leaf at parameter ``s`` is ``{us = f(s, theta, phi)}``. Nullness of the
hypersurface is equivalent to the first-order equation

.. math::

    \\partial_s f = F = -b^i \\partial_i f + \\Omega^2 (\\not g^{-1})^{ij}
    \\partial_i f \\partial_j f,

with every coefficient evaluated at ``us = f``. Applying the round Laplacian
gives a transport equation for ``u = lap f``,

.. math::

    \\partial_s u = X^i \\partial_i u + re, \\qquad
    X^i = -b^i + 2\\Omega^2(\\not g^{-1})^{ij}\\partial_j f,

whose remainder ``re`` is assembled term by term in :func:`assemble_re`.

Both forms are integrated with a pseudo-spectral classical RK4 scheme on the
spherical-harmonic coefficients, truncated to the grid's dealiasing band
after every stage.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NotMeanZero, OutOfDomain, StepRejected
from .geometry import PerturbedMetric
from .sphere import ScalarField, SphereGrid, TangentField, covariant_derivatives

COMPLETED = "Completed"
BOUNDARY_HIT = "BoundaryHit"
GUARD_HIT = "GuardHit"

LEDGER_COLUMNS = ("step", "s", "h", "mean_f", "grad_norm", "lap_norm", "max_abs_f",
                  "null_residual_max", "max_abs_F")


@dataclass(frozen=True)
class EvolutionConfig:
    """Integration settings.

    Parameters
    ----------
    s_start, s_end : float
        Parameter interval.
    h0 : float
        Base step.
    stretch : bool
        Use steps ``h0 (r0 + s) / r0`` capped at ``h_max``.
    h_max : float
        Largest step when stretching.
    n, p : int, float
        Sobolev orders of the recorded norms: ``grad_norm`` is the
        ``W^{n+1,p}`` norm of ``grad f`` and ``lap_norm`` the ``W^{n,p}`` norm
        of ``lap f``.
    guard : float or None
        Fraction ``a`` arming the stop condition ``|f| >= a kappa r0``.
    tail_tol : float
        Tolerance of the per-step spectral-tail test.
    output_times : tuple of float
        Values of ``s`` that every step sequence hits exactly.
    diagnostics : bool
        Record norms and the null residual at every step.
    budgets : tuple or None
        ``(delta_o, delta_m)``; initial data violating them triggers a warning.
    """

    s_start: float = 0.0
    s_end: float = 10.0
    h0: float = 0.05
    stretch: bool = True
    h_max: float = 10.0
    n: int = 2
    p: float = 2.0
    guard: float | None = None
    tail_tol: float = 1e-6
    output_times: tuple = ()
    diagnostics: bool = True
    budgets: tuple | None = None

    def __post_init__(self):
        if not self.h0 > 0:
            raise ValueError("h0 must be positive")
        if not self.s_end > self.s_start:
            raise ValueError("s_end must exceed s_start")
        if self.guard is not None and not 0 < self.guard < 1:
            raise ValueError("guard fraction must lie in (0, 1)")

    def schedule(self, r0: float = 1.0):
        """Deterministic list of step end points ``[s_0, s_1, ..., s_end]``."""
        stops = sorted({float(t) for t in self.output_times if self.s_start < t < self.s_end}
                       | {float(self.s_end)})
        s = float(self.s_start)
        pts = [s]
        for stop in stops:
            while s < stop:
                h = self.h0 * (r0 + s) / r0 if self.stretch else self.h0
                h = min(h, self.h_max) if self.stretch else h
                if s + h >= stop - 1e-12 * max(1.0, abs(stop)):
                    s = stop
                elif s + 1.5 * h > stop:
                    s = s + 0.5 * (stop - s)
                else:
                    s = s + h
                pts.append(s)
        return pts


@dataclass
class FoliationState:
    """One leaf ``(s, f_s)`` with cached derived quantities."""

    s: float
    f: ScalarField
    X: TangentField | None = None
    F_rhs: ScalarField | None = None
    norms: dict = field(default_factory=dict)
    coeffs: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Trajectory:
    """Sequence of leaves produced by an integrator.

    Attributes
    ----------
    states : list of FoliationState
        One state per step end point, starting with the initial leaf.
    ledger : list of dict
        Per-step diagnostic rows with keys :data:`LEDGER_COLUMNS`.
    status : str
        ``Completed``, ``BoundaryHit`` or ``GuardHit``.
    """

    states: list
    ledger: list
    status: str
    config: EvolutionConfig
    method: str = "direct"

    @property
    def s(self) -> np.ndarray:
        return np.array([st.s for st in self.states])

    @property
    def final(self) -> FoliationState:
        return self.states[-1]

    def state_at(self, s: float) -> FoliationState:
        i = int(np.argmin(np.abs(self.s - s)))
        if abs(self.states[i].s - s) > 1e-9 * max(1.0, abs(s)):
            raise KeyError(f"no state recorded at s = {s}")
        return self.states[i]


# ----------------------------------------------------------------------
# Pointwise assembly
# ----------------------------------------------------------------------


def _dot(a, b):
    return np.einsum("a...,a...->...", a, b)


def _quad(G, a, b):
    return np.einsum("a...,ab...,b...->...", a, G, b)


class _Kin:
    """Grid values of ``f`` and its derivatives from a coefficient array."""

    def __init__(self, grid: SphereGrid, coeffs, second=False):
        self.grid = grid
        self.coeffs = coeffs
        self.f = grid.synthesis(coeffs)
        dth, dph = grid.synthesis_grad(coeffs)
        self.df = grid._frame_combine(dth, dph)
        if second:
            L = coeffs.shape[-1] - 1
            l = np.arange(L + 1, dtype=float)[:, None]
            lc = -l * (l + 1.0) * coeffs
            self.lap_coeffs = lc
            self.lap = grid.synthesis(lc)
            a, b = grid.synthesis_grad(lc)
            self.dlap = grid._frame_combine(a, b)
            self.hess = grid.covariant_derivative(self.df)


def _F_from(sample, df):
    return -_dot(sample.b[0][0], df) + _quad(sample.inv[0][0], df, df)


def _X_from(sample, df):
    return -sample.b[0][0] + 2.0 * np.einsum("ab...,b...->a...", sample.inv[0][0], df)


def _re_from(sample, kin: _Kin):
    """Remainder of the Laplacian-form equation, term by term."""
    fi, H, Lf = kin.df, kin.hess, kin.lap
    b, G = sample.b, sample.inv
    grad_sq = _dot(fi, fi)
    ein = np.einsum
    out = -_dot(b[0][0], fi)
    out += 2.0 * _quad(G[0][0], fi, fi)
    out -= _dot(ein("kka...->a...", b[0][2]), fi)
    out -= 2.0 * ein("ka...,ka...->...", b[0][1], H)
    out -= 2.0 * ein("k...,ka...,a...->...", fi, b[1][1], fi)
    out -= _dot(b[1][0], fi) * Lf
    out -= 2.0 * ein("a...,k...,ka...->...", b[1][0], fi, H)
    out -= _dot(b[2][0], fi) * grad_sq
    out += ein("kkab...,a...,b...->...", G[0][2], fi, fi)
    out += 4.0 * ein("kab...,a...,kb...->...", G[0][1], fi, H)
    out += 2.0 * ein("ab...,ka...,kb...->...", G[0][0], H, H)
    out += 2.0 * ein("k...,kab...,a...,b...->...", fi, G[1][1], fi, fi)
    out += 4.0 * ein("ab...,a...,k...,kb...->...", G[1][0], fi, fi, H)
    out += _quad(G[1][0], fi, fi) * Lf
    out += _quad(G[2][0], fi, fi) * grad_sq
    return out


def _sample(metric: PerturbedMetric, s, fvals, orders):
    # the remainder needs mixed orders m + k <= 2 only
    return metric.sample(fvals, s, orders=orders, domain_exc=OutOfDomain, total=2)


# ----------------------------------------------------------------------
# Public pointwise operations
# ----------------------------------------------------------------------


def rhs_F(metric: PerturbedMetric, state: FoliationState) -> ScalarField:
    """Right side ``F`` of the graph equation, coefficients taken at ``us = f``.

    Raises
    ------
    OutOfDomain
        If the graph leaves the kappa-neighbourhood.
    """
    kin = _Kin(metric.grid, state.f.coeffs)
    sample = _sample(metric, state.s, state.f.values, (0, 0))
    return ScalarField(metric.grid, _F_from(sample, kin.df))


def assemble_X(metric: PerturbedMetric, state: FoliationState) -> TangentField:
    """Transport vector ``X = -b + 2 Omega^2 gslash^{-1} df``."""
    kin = _Kin(metric.grid, state.f.coeffs)
    sample = _sample(metric, state.s, state.f.values, (0, 0))
    return TangentField.from_ambient(metric.grid, _X_from(sample, kin.df))


def assemble_re(metric: PerturbedMetric, state: FoliationState) -> ScalarField:
    """Remainder ``re = lap F - X . grad(lap f)`` assembled term by term.

    Every angular derivative of a coefficient evaluated at ``us = f`` carries
    its chain-rule contributions through ``d_us``; the assembly never forms
    ``lap F`` spectrally.
    """
    kin = _Kin(metric.grid, state.f.coeffs, second=True)
    sample = _sample(metric, state.s, state.f.values, (2, 2))
    return ScalarField(metric.grid, _re_from(sample, kin))


@dataclass
class FrameQuantities:
    """Null-frame coefficients of the graph (``vareps <= 0``, ``bdot = -X``)."""

    vareps: ScalarField
    vareps_vec: TangentField
    bdot: TangentField


def _frame_arrays(sample, df):
    vareps = -_quad(sample.inv[0][0], df, df)
    vec = -2.0 * np.einsum("ab...,b...->a...", sample.inv[0][0], df)
    return vareps, vec


def frame_quantities(metric: PerturbedMetric, state: FoliationState) -> FrameQuantities:
    kin = _Kin(metric.grid, state.f.coeffs)
    sample = _sample(metric, state.s, state.f.values, (0, 0))
    vareps, vec = _frame_arrays(sample, kin.df)
    g = metric.grid
    return FrameQuantities(ScalarField(g, vareps), TangentField.from_ambient(g, vec),
                           TangentField.from_ambient(g, sample.b[0][0] + vec))


def _null_residual(sample, df):
    vareps, vec = _frame_arrays(sample, df)
    b = sample.b[0][0]
    theta_part = (b + vec) - b  # d theta^i (Ldot) - b^i ds (Ldot)
    return 4.0 * sample.omega_sq[0][0] * vareps + _quad(sample.gslash[0][0], theta_part, theta_part)


def null_residual(metric: PerturbedMetric, state: FoliationState) -> ScalarField:
    """Pointwise ``g(Ldot, Ldot)`` on the graph; identically zero in exact arithmetic."""
    kin = _Kin(metric.grid, state.f.coeffs)
    sample = _sample(metric, state.s, state.f.values, (0, 0))
    return ScalarField(metric.grid, _null_residual(sample, kin.df))


# ----------------------------------------------------------------------
# Integrators
# ----------------------------------------------------------------------


def _rk4(rhs, y, s, h):
    """One classical RK4 step on a tuple of arrays."""
    k1 = rhs(s, y, h)
    k2 = rhs(s + 0.5 * h, tuple(a + 0.5 * h * k for a, k in zip(y, k1)), h)
    k3 = rhs(s + 0.5 * h, tuple(a + 0.5 * h * k for a, k in zip(y, k2)), h)
    k4 = rhs(s + h, tuple(a + h * k for a, k in zip(y, k3)), h)
    return tuple(a + (h / 6.0) * (p + 2.0 * q + 2.0 * r + w)
                 for a, p, q, r, w in zip(y, k1, k2, k3, k4))


def _l2(grid, c):
    return math.sqrt(float(np.sum(c * c)))


def _tail(grid, c):
    return _l2(grid, c[..., grid.lmax + 1:, :])


def state_diagnostics(metric: PerturbedMetric, s: float, coeffs, n: int, p: float):
    """Norm ledger entries of one leaf."""
    grid = metric.grid
    f = ScalarField.from_coeffs(grid, coeffs)
    kin = _Kin(grid, coeffs)
    sample = _sample(metric, s, f.values, (0, 0))
    F = _F_from(sample, kin.df)
    nres = _null_residual(sample, kin.df)
    ders = covariant_derivatives(f, n + 2)
    grad_norm = sum(float(grid.integrate(np.sum(T.reshape(-1, *grid.shape) ** 2, axis=0) ** (p / 2)))
                    for T in ders[1:]) ** (1.0 / p)
    lapf = ScalarField(grid, grid.synthesis_laplacian(coeffs))
    lders = covariant_derivatives(lapf, n)
    lap_norm = sum(float(grid.integrate(np.sum(T.reshape(-1, *grid.shape) ** 2, axis=0) ** (p / 2)))
                   for T in lders) ** (1.0 / p)
    return {
        "mean_f": f.mean(),
        "grad_norm": grad_norm,
        "lap_norm": lap_norm,
        "max_abs_f": f.max_abs(),
        "null_residual_max": float(np.max(np.abs(nres))),
        "max_abs_F": float(np.max(np.abs(F))),
    }, f, F, sample, kin


def _check_budgets(metric, f0: ScalarField, cfg: EvolutionConfig):
    if cfg.budgets is None:
        return
    from .sphere import gradient_norm
    r0 = metric.params.r0
    d_o, d_m = cfg.budgets
    if gradient_norm(f0, cfg.n + 1, cfg.p) > d_o * r0 or abs(f0.mean()) > d_m * r0:
        warnings.warn("initial data exceed the configured budgets", RuntimeWarning, stacklevel=3)


def _domain_status(metric, maxabs, cfg):
    kr = metric.params.kappa * metric.params.r0
    if maxabs >= kr:
        return BOUNDARY_HIT
    if cfg.guard is not None and maxabs >= cfg.guard * kr:
        return GUARD_HIT
    return None


def _record(metric, traj_states, ledger, step, s, h, coeffs, cfg):
    grid = metric.grid
    if cfg.diagnostics:
        diag, f, F, sample, kin = state_diagnostics(metric, s, coeffs, cfg.n, cfg.p)
        X = TangentField.from_ambient(grid, _X_from(sample, kin.df))
        st = FoliationState(s, f, X, ScalarField(grid, F), diag, coeffs)
    else:
        f = ScalarField.from_coeffs(grid, coeffs)
        diag = {"mean_f": f.mean(), "max_abs_f": f.max_abs()}
        st = FoliationState(s, f, None, None, diag, coeffs)
    traj_states.append(st)
    row = {"step": step, "s": s, "h": h}
    row.update(diag)
    ledger.append(row)
    return st


def _integrate(metric, y0, rhs, to_coeffs, cfg, method, post=None):
    """Shared RK4 driver.

    ``rhs(s, y, h)`` returns the derivative of the state tuple ``y`` and
    ``to_coeffs`` maps ``y`` to the coefficients of ``f``.
    """
    r0 = metric.params.r0
    pts = cfg.schedule(r0)
    states, ledger = [], []
    y = y0
    c0 = to_coeffs(y)
    if _domain_status(metric, float(np.max(np.abs(metric.grid.synthesis(c0)))), cfg) == BOUNDARY_HIT:
        # no metric data outside the neighbourhood, so record without diagnostics
        _record(metric, states, ledger, 0, pts[0], 0.0, c0, replace(cfg, diagnostics=False))
        return Trajectory(states, ledger, BOUNDARY_HIT, cfg, method)
    st = _record(metric, states, ledger, 0, pts[0], 0.0, c0, cfg)
    status = _domain_status(metric, st.f.max_abs(), cfg)
    if status is not None:
        return Trajectory(states, ledger, status, cfg, method)
    for j in range(1, len(pts)):
        s, h = pts[j - 1], pts[j] - pts[j - 1]
        try:
            y = _rk4(rhs, y, s, h)
        except OutOfDomain:
            return Trajectory(states, ledger, BOUNDARY_HIT, cfg, method)
        if post is not None:
            y = post(y)
        c = to_coeffs(y)
        maxabs = float(np.max(np.abs(metric.grid.synthesis(c))))
        status = _domain_status(metric, maxabs, cfg)
        if status == BOUNDARY_HIT:
            return Trajectory(states, ledger, status, cfg, method)
        try:
            _record(metric, states, ledger, j, pts[j], h, c, cfg)
        except OutOfDomain:
            return Trajectory(states, ledger, BOUNDARY_HIT, cfg, method)
        if status is not None:
            return Trajectory(states, ledger, status, cfg, method)
    return Trajectory(states, ledger, COMPLETED, cfg, method)


def _stage(metric: PerturbedMetric, cfg: EvolutionConfig, s, c, h):
    """Truncated RK stage derivative of ``f`` plus the kinematics and sample used.

    Every integrator that carries ``f`` goes through this function, so paired
    runs reproduce single runs bit for bit.
    """
    grid = metric.grid
    kin = _Kin(grid, c)
    sample = _sample(metric, s, kin.f, (0, 0))
    Fc = grid.analysis(_F_from(sample, kin.df))
    tail = _tail(grid, Fc)
    if h * tail > cfg.tail_tol * max(_l2(grid, c), 1e-300):
        raise StepRejected(f"spectral tail {tail:.3e} at s = {s:.4g} exceeds tolerance")
    return grid.truncate(Fc), kin, sample


def evolve(metric: PerturbedMetric, f0: ScalarField, cfg: EvolutionConfig | None = None) -> Trajectory:
    """Integrate the graph equation with pseudo-spectral RK4.

    Parameters
    ----------
    metric : PerturbedMetric
    f0 : ScalarField
        Initial leaf; it is truncated to the dealiasing band.
    cfg : EvolutionConfig

    Returns
    -------
    Trajectory

    Raises
    ------
    StepRejected
        If ``h * |P_{>lmax} F| > tail_tol * |f|`` on some step.
    """
    cfg = cfg if cfg is not None else EvolutionConfig()
    grid = metric.grid
    _check_budgets(metric, f0, cfg)
    c0 = grid.truncate(f0.coeffs)

    def rhs(s, y, h):
        return (_stage(metric, cfg, s, y[0], h)[0],)

    return _integrate(metric, (c0,), rhs, lambda y: y[0], cfg, "direct")


def _recon(grid, u, mean):
    L = u.shape[-1] - 1
    l = np.arange(L + 1, dtype=float)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(l > 0, -u / (l * (l + 1.0)), 0.0)
    c[0, 0, 0] = mean * math.sqrt(4.0 * math.pi)
    return c


def evolve_laplacian_form(metric: PerturbedMetric, f0: ScalarField,
                          cfg: EvolutionConfig | None = None) -> Trajectory:
    """Co-evolve ``u = lap f`` and ``mean f`` and reconstruct ``f``.

    ``u`` follows ``d_s u = X . grad u + re`` with ``re`` from the term-by-term
    assembly; the mean follows ``d_s mean f = mean F``. The mean of ``u`` is
    re-projected to zero after every step.
    """
    cfg = cfg if cfg is not None else EvolutionConfig()
    grid = metric.grid
    _check_budgets(metric, f0, cfg)
    c0 = grid.truncate(f0.coeffs)
    L = grid.band
    l = np.arange(L + 1, dtype=float)[:, None]
    u0 = -l * (l + 1.0) * c0
    m0 = np.array(f0.mean())

    def rhs(s, y, h):
        u, m = y
        if abs(u[0, 0, 0]) > 1e-10 * max(1.0, _l2(grid, u)):
            raise NotMeanZero("Laplacian variable acquired a mean")
        c = _recon(grid, u, float(m))
        kin = _Kin(grid, c, second=True)
        sample = _sample(metric, s, kin.f, (2, 2))
        X = _X_from(sample, kin.df)
        du = _dot(X, kin.dlap) + _re_from(sample, kin)
        dm = grid.mean(_F_from(sample, kin.df))
        duc = grid.truncate(grid.analysis(du))
        duc[0, 0, 0] = 0.0
        return duc, np.asarray(dm)

    def post(y):
        u, m = y
        u = u.copy()
        u[0, 0, 0] = 0.0
        return u, m

    return _integrate(metric, (u0, m0), rhs, lambda y: _recon(grid, y[0], float(y[1])), cfg,
                      "laplacian", post)
