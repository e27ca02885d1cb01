"""Flows of transport fields, Gronwall checks and ensemble certificates.

The flow part integrates ``d phi_s / ds = X(phi_s)`` node by node with
spectral off-grid evaluation of ``X`` and obtains the volume factor
``phi~_s`` (``(phi_s)_* dvol = phi~_s dvol``) twice: by transporting
``log phi~`` with ``(d_s + X . grad) log phi~ = -div X`` on the grid, and from
the Jacobian determinant of the discrete map.

The certificate part runs seeded ensembles of foliations or perturbation
pairs and measures the constants of the a-priori estimates as ratios of
ledger quantities. Every constant is recomputable from the ledgers alone.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import (ConfigError, EnsembleIncomplete, GridMismatch, HypothesisViolated,
                     NonDiffeo, NullFolError, OffGridEvalFailure)
from .evolution import (COMPLETED, EvolutionConfig, Trajectory, _dot, _Kin, _re_from, _rk4,
                        _sample, _X_from, evolve)
from .geometry import PerturbationProfile, PerturbedMetric, SchwarzschildParams
from .perturbation import run_full
from .sphere import (ScalarField, SphereGrid, TangentField, covariant_derivatives, gradient_norm,
                     rotation_field, sobolev_norm)

# ----------------------------------------------------------------------
# Flows and volume factors
# ----------------------------------------------------------------------


@dataclass
class GronwallFlow:
    """Discrete flow of a transport field.

    Attributes
    ----------
    s : ndarray
        Step points.
    positions : list of ndarray
        Image ``phi_s(x)`` of every grid node, ambient ``(3, nlat, nlon)``.
    vol_factor : list of ScalarField
        Eulerian ``phi~_s`` on the grid, from the transported logarithm.
    log_vol_lagrangian : list of ndarray
        ``log phi~_s(phi_s(x))`` integrated along each trajectory.
    log_vol_jacobian : list of ndarray
        ``-log det D phi_s(x)`` from the discrete map.
    k_bound : float
        ``sup_s (r0 + s)^2 / r0 * sup |div X(s)|`` over the step points.
    agreement : float
        Largest gap between the Eulerian factor read off at the image points
        and the Jacobian factor.
    """

    grid: SphereGrid
    s: np.ndarray
    positions: list
    vol_factor: list
    log_vol_lagrangian: list
    log_vol_jacobian: list
    k_bound: float
    agreement: float
    r0: float = 1.0


def _angles(P):
    r = np.sqrt(np.sum(P * P, axis=0))
    th = np.arccos(np.clip(P[2] / r, -1.0, 1.0))
    ph = np.arctan2(P[1], P[0])
    return th.ravel(), ph.ravel()


def _eval_at(grid, coeffs, P):
    if coeffs.shape[-1] - 1 > grid.band:
        raise OffGridEvalFailure("coefficients exceed the grid band")
    th, ph = _angles(P)
    out = grid.synthesize_at(coeffs, th, ph)
    if not np.all(np.isfinite(out)):
        raise OffGridEvalFailure("off-grid synthesis produced non-finite values")
    return out.reshape(coeffs.shape[:-3] + P.shape[1:])


def _as_ambient(grid, X):
    if isinstance(X, TangentField):
        return X.ambient()
    if X is None:
        return np.zeros((3,) + grid.shape)
    return np.asarray(X, dtype=float)


def _x_source(grid, X_series):
    """Callable ``s -> ambient X`` and the step points it prescribes (or ``None``)."""
    if callable(X_series):
        return (lambda s: _as_ambient(grid, X_series(s))), None
    pairs = [(float(s), _as_ambient(grid, X)) for s, X in X_series]
    ss = np.array([p[0] for p in pairs])

    def at(s):
        j = int(np.clip(np.searchsorted(ss, s, side="right") - 1, 0, len(ss) - 2))
        w = (s - ss[j]) / (ss[j + 1] - ss[j])
        return (1.0 - w) * pairs[j][1] + w * pairs[j + 1][1]

    return at, list(ss)


def _divergence(grid, Xa):
    D = grid.covariant_derivative(Xa)
    return np.einsum("kk...->...", D)


def _jacobian(grid, P):
    """Area Jacobian of the map ``x -> P(x)`` between unit spheres."""
    c = grid.analysis(P)
    dth, dph = grid.synthesis_grad(c)
    return np.einsum("a...,a...->...", P, np.cross(dth, dph, axis=0))


# RK4 is stable on the imaginary axis up to |h lambda| = 2.83; advection of
# degree L by a field of angular speed v has |lambda| <= v L
_CFL = 2.0


def _substeps(h, speed, band):
    return max(1, int(math.ceil(abs(h) * speed * band / _CFL)))


def _speed(Xa):
    v = float(np.max(np.sqrt(np.sum(Xa * Xa, axis=0))))
    if not math.isfinite(v):
        raise OffGridEvalFailure("transport field is not finite")
    return v


def integrate_flow(X_series, cfg: EvolutionConfig | None = None, grid: SphereGrid | None = None,
                   r0: float = 1.0) -> GronwallFlow:
    """Integrate the flow of ``X`` and its volume factor.

    Parameters
    ----------
    X_series : callable or sequence of (s, field)
        Either ``s -> TangentField`` (or ambient array), evaluated at every RK
        stage, or samples at step points, interpolated linearly in ``s``; the
        samples then fix the step sequence.
    cfg : EvolutionConfig
        Step sequence for callable input.
    grid : SphereGrid
        Needed when the fields are bare arrays.

    Each interval is split into substeps short enough for the advection of
    the transported logarithm to stay inside the RK4 stability region.

    Raises
    ------
    OffGridEvalFailure
        If off-grid synthesis fails.
    NonDiffeo
        If the Jacobian determinant of the discrete map is not positive.
    """
    cfg = cfg if cfg is not None else EvolutionConfig()
    if grid is None:
        probe = X_series(cfg.s_start) if callable(X_series) else X_series[0][1]
        grid = probe.grid
    Xat, pts = _x_source(grid, X_series)
    if pts is None:
        pts = cfg.schedule(r0)
    L = grid.band

    def rhs(s, y, h):
        P, lL, lE = y
        Xa = Xat(s)
        div = _divergence(grid, Xa)
        both = _eval_at(grid, grid.analysis(np.concatenate([Xa, div[None]])), P)
        # degree-one homogeneous extension off the sphere keeps RK4 stages
        # of a rotation field exactly rotation-equivariant
        rad = np.sqrt(np.sum(P * P, axis=0))
        xh = P / rad
        Xp = both[:3] - xh * np.sum(xh * both[:3], axis=0)
        Xp = rad * Xp
        dlL = -both[3]
        a, b = grid.synthesis_grad(lE)
        dlE = -(_dot(Xa, grid._frame_combine(a, b)) + div)
        return Xp, dlL, grid.truncate(grid.analysis(dlE))

    def kfactor(s):
        return (r0 + s) ** 2 / r0 * float(np.max(np.abs(_divergence(grid, Xat(s)))))

    P = grid.x_hat.copy()
    lL = np.zeros(grid.shape)
    lE = np.zeros((2, L + 1, L + 1))
    positions, lag, jac, vol = [P], [lL], [np.zeros(grid.shape)], [ScalarField.constant(grid, 1.0)]
    k = kfactor(pts[0])
    gap = 0.0
    for j in range(1, len(pts)):
        s, h = pts[j - 1], pts[j] - pts[j - 1]
        nsub = _substeps(h, max(_speed(Xat(s)), _speed(Xat(pts[j]))), L)
        for i in range(nsub):
            t = s + h * i / nsub
            P, lL, lE = _rk4(rhs, (P, lL, lE), t, (s + h * (i + 1) / nsub) - t)
            P = P / np.sqrt(np.sum(P * P, axis=0))
        J = _jacobian(grid, P)
        if not np.all(np.isfinite(J)) or np.any(J <= 0):
            raise NonDiffeo(f"Jacobian determinant not positive at s = {pts[j]:.4g}")
        positions.append(P)
        lag.append(lL)
        jac.append(-np.log(J))
        vol.append(ScalarField(grid, np.exp(grid.synthesis(lE))))
        at_images = _eval_at(grid, lE, P)
        gap = max(gap, float(np.max(np.abs(at_images - jac[-1]))))
        k = max(k, kfactor(pts[j]))
    return GronwallFlow(grid, np.asarray(pts, float), positions, vol, lag, jac, k, gap, r0)


def flow_of_trajectory(traj: Trajectory, sign: float = 1.0) -> GronwallFlow:
    """Flow of ``sign * X`` recorded along a trajectory."""
    grid = traj.states[0].f.grid
    series = [(st.s, sign * st.X.ambient()) for st in traj.states]
    return integrate_flow(series, traj.config, grid)


def lp_comparability(flow: GronwallFlow, f: ScalarField, p: float = 2.0,
                     rtol: float = 1e-8) -> dict:
    """Compare ``|f o phi_s|_{L^p}`` with ``|f|_{L^p}`` along a flow.

    The pulled-back norm is computed directly, by off-grid synthesis of ``f``
    at the image points, and by the change of variables
    ``int |f o phi|^p = int |f|^p phi~``.

    Returns
    -------
    dict
        Arrays ``direct``, ``change_of_variables``, ``ratio`` (direct over
        ``|f|_{L^p}``), the bounds ``exp(-k)``, ``exp(k)``, ``within`` and the
        largest relative gap between the two computations. Ratios within
        ``rtol`` of the bounds count as inside, absorbing the
        time-discretisation error of the flow.

    Raises
    ------
    GridMismatch
        If ``f`` lives on another grid.
    """
    g = flow.grid
    if f.grid != g:
        raise GridMismatch("field and flow live on different grids")
    base = float(g.integrate(np.abs(f.values) ** p)) ** (1.0 / p)
    direct, cov = [], []
    for P, vol in zip(flow.positions, flow.vol_factor):
        vals = _eval_at(g, f.coeffs, P)
        direct.append(float(g.integrate(np.abs(vals) ** p)) ** (1.0 / p))
        cov.append(float(g.integrate(np.abs(f.values) ** p * vol.values)) ** (1.0 / p))
    direct, cov = np.array(direct), np.array(cov)
    ratio = direct / base if base > 0 else np.ones_like(direct)
    lo, hi = math.exp(-flow.k_bound), math.exp(flow.k_bound)
    return {
        "norm": base,
        "direct": direct,
        "change_of_variables": cov,
        "ratio": ratio,
        "lower": lo,
        "upper": hi,
        "within": bool(np.all((ratio >= lo * (1.0 - rtol)) & (ratio <= hi * (1.0 + rtol)))),
        "method_gap": float(np.max(np.abs(direct - cov)) / max(base, 1e-300)),
    }


# ----------------------------------------------------------------------
# Transport estimate and commutator identity
# ----------------------------------------------------------------------


def commutator_residual(grid: SphereGrid, Y, u_coeffs, re=None) -> float:
    """Residual of the first-order rotated transport identity.

    For ``d_s u = -Y . grad u + re`` the rotated derivative satisfies
    ``d_s(R_i u) + Y . grad(R_i u) = R_i re - [R_i, Y] . grad u``. With
    ``d_s(R_i u) = R_i(d_s u)`` the residual reduces to
    ``R_i(Y . grad u) - Y . grad(R_i u) - [R_i, Y] . grad u``, maximised over
    ``i`` and the grid.
    """
    Ya = _as_ambient(grid, Y)
    a, b = grid.synthesis_grad(u_coeffs)
    du = grid._frame_combine(a, b)
    worst = 0.0
    for i in (1, 2, 3):
        R = rotation_field(grid, i)
        Ra = R.ambient()
        Ru = _dot(Ra, du)
        lhs = _dot(Ra, grid.gradient(_dot(Ya, du)))
        DRu = grid.gradient(Ru)
        DY, DR = grid.covariant_derivative(Ya), grid.covariant_derivative(Ra)
        br = np.einsum("k...,ka...->a...", Ra, DY) - np.einsum("k...,ka...->a...", Ya, DR)
        rhs = _dot(Ya, DRu) + _dot(br, du)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


@dataclass
class TransportReport:
    """Outcome of a transport-estimate check."""

    s: np.ndarray
    norms: np.ndarray
    bound_base: np.ndarray
    k: float
    prefactor: float
    c_measured: float
    c_ceiling: float
    commutator_residual: float
    u_scale: float
    passed: bool
    extra: dict = field(default_factory=dict)


def transport_check(grid: SphereGrid, Y_fn, re_fn, u0: ScalarField, s_points, m: int = 0,
                    p: float = 2.0, k: float | None = None, r0: float = 1.0,
                    c_ceiling: float = 4.0, rtol: float = 1e-8) -> TransportReport:
    """Evolve ``d_s u + Y . grad u = re`` and test the Gronwall estimate.

    Checks ``|u(s)|^{m,p} <= exp(c k) (|u(0)|^{m,p} + int_0^s |re|^{m,p})``
    and reports the smallest ``c`` that makes it hold. ``k`` defaults to
    ``sup (r0 + s)^2 / r0 * sup |div Y|``. Prefactors within ``1 + rtol`` of
    one count as one, absorbing the time-discretisation error.
    """
    pts = [float(s) for s in s_points]
    L = grid.band

    def rhs(s, y, h):
        Ya = _as_ambient(grid, Y_fn(s))
        a, b = grid.synthesis_grad(y[0])
        val = -_dot(Ya, grid._frame_combine(a, b)) + re_fn(s)
        return (grid.truncate(grid.analysis(val)),)

    def re_norm(s):
        return sobolev_norm(ScalarField(grid, np.broadcast_to(re_fn(s), grid.shape)), m, p)

    c = grid.truncate(u0.coeffs)
    norms = [sobolev_norm(ScalarField.from_coeffs(grid, c), m, p)]
    base = [norms[0]]
    integral = 0.0
    rprev = re_norm(pts[0])
    kk = 0.0
    resid = commutator_residual(grid, Y_fn(pts[0]), c)
    scale = float(np.max(np.abs(grid.synthesis(c))))
    for j in range(1, len(pts)):
        s, h = pts[j - 1], pts[j] - pts[j - 1]
        speed = max(_speed(_as_ambient(grid, Y_fn(s))), _speed(_as_ambient(grid, Y_fn(pts[j]))))
        nsub = _substeps(h, speed, L)
        for i in range(nsub):
            t = s + h * i / nsub
            (c,) = _rk4(rhs, (c,), t, (s + h * (i + 1) / nsub) - t)
        u = ScalarField.from_coeffs(grid, c)
        rnext = re_norm(pts[j])
        integral += 0.5 * h * (rprev + rnext)
        rprev = rnext
        norms.append(sobolev_norm(u, m, p))
        base.append(norms[0] + integral)
        resid = max(resid, commutator_residual(grid, Y_fn(pts[j]), c))
        scale = max(scale, u.max_abs())
    for s in pts:
        Ya = _as_ambient(grid, Y_fn(s))
        kk = max(kk, (r0 + s) ** 2 / r0 * float(np.max(np.abs(_divergence(grid, Ya)))))
    k = kk if k is None else k
    norms, base = np.array(norms), np.array(base)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(base > 0, norms / base, 1.0)
    pref = float(np.max(ratios))
    if pref <= 1.0 + rtol:
        cm = 0.0
    elif k > 0:
        cm = math.log(pref) / k
    else:
        cm = math.inf
    return TransportReport(np.array(pts), norms, base, float(k), pref, cm, c_ceiling, resid,
                           scale, cm <= c_ceiling, {"u_final": c})


def _hermite(c0, c1, F0, F1, h, t):
    """Cubic Hermite interpolant at ``t`` in ``[0, h]``."""
    x = t / h
    h00 = 2 * x ** 3 - 3 * x ** 2 + 1
    h10 = x ** 3 - 2 * x ** 2 + x
    h01 = -2 * x ** 3 + 3 * x ** 2
    h11 = x ** 3 - x ** 2
    return h00 * c0 + h10 * h * F0 + h01 * c1 + h11 * h * F1


def transport_norm_check(metric: PerturbedMetric, trajectory: Trajectory, m: int = 0,
                         p: float = 2.0, k_ceiling: float = 1.0,
                         c_ceiling: float = 4.0) -> TransportReport:
    """Gronwall check on the Laplacian-form transport of a trajectory.

    The graph equation gives ``d_s(lap f) - X . grad(lap f) = re``, which is
    the lemma's form ``d_s u + Y . grad u = re`` with ``Y = -X``. Between
    recorded leaves ``f`` is rebuilt by cubic Hermite interpolation from
    ``(f, F)``, so ``Y`` and ``re`` are available at every RK stage and the
    passive scalar started from ``lap f(0)`` must reproduce ``lap f(s)``.

    Raises
    ------
    HypothesisViolated
        If ``sup (r0 + s)^2 / r0 * |X|^{n+1,p}`` exceeds ``k_ceiling``.
    """
    grid = metric.grid
    r0 = metric.params.r0
    states = trajectory.states
    if states[0].F_rhs is None:
        raise ValueError("the trajectory was recorded without diagnostics")
    ss = trajectory.s
    n = trajectory.config.n
    kx = 0.0
    for st in states:
        kx = max(kx, (r0 + st.s) ** 2 / r0 * sobolev_norm(st.X, n + 1, p))
    if kx > k_ceiling:
        raise HypothesisViolated(f"transport field decay constant {kx:.3g} exceeds {k_ceiling}")
    Fc = [grid.truncate(st.F_rhs.coeffs) for st in states]
    cache = {}

    def data(s):
        key = float(s)
        if key not in cache:
            j = int(np.clip(np.searchsorted(ss, s, side="right") - 1, 0, len(ss) - 2))
            h = ss[j + 1] - ss[j]
            c = _hermite(states[j].coeffs, states[j + 1].coeffs, Fc[j], Fc[j + 1], h, s - ss[j])
            kin = _Kin(grid, c, second=True)
            sample = _sample(metric, s, kin.f, (2, 2))
            cache.clear()
            cache[key] = (-_X_from(sample, kin.df), _re_from(sample, kin))
        return cache[key]

    lap0 = ScalarField(grid, grid.synthesis_laplacian(states[0].coeffs))
    rep = transport_check(grid, lambda s: data(s)[0], lambda s: data(s)[1], lap0, ss, m, p,
                          k=kx, r0=r0, c_ceiling=c_ceiling)
    last = grid.synthesis_laplacian(states[-1].coeffs)
    rep.extra["tracking_error"] = float(np.max(np.abs(grid.synthesis(rep.extra["u_final"]) - last)))
    rep.extra["k_divergence"] = max((r0 + st.s) ** 2 / r0 * float(np.max(np.abs(
        _divergence(grid, st.X.ambient())))) for st in states)
    return rep


# ----------------------------------------------------------------------
# Ensembles
# ----------------------------------------------------------------------

CEILINGS = {
    "c_o": 2.0, "c_mm": 2.0, "c_mo": 8.0, "decay_exponent": 1.9, "c_drift": 8.0,
    "dd_c_o": 2.0, "dd_c_om": 2.0, "dd_c_m": 2.0, "dd_c_mo": 8.0, "dd_np1_ratio": 2.0,
    "err_c": 8.0, "lemma_c": 2.0, "lin_mean_drift": 1e-10,
}

KINDS = ("foliation", "perturbation", "constant")


@dataclass(frozen=True)
class EnsembleSpec:
    """Seeded ensemble of runs.

    ``kind`` selects single foliations (``foliation``), perturbation pairs
    (``perturbation``) or pairs whose perturbed leaf is a level set of ``us``
    (``constant``). Run ``i`` draws its initial data from the generator seeded
    with ``(data_seed, i)``; with ``profile="random"`` its metric uses seed
    ``profile_seed + i``.
    """

    kind: str = "foliation"
    n_runs: int = 20
    epsilon: float = 0.01
    delta_o: float = 0.02
    delta_m: float = 0.1
    d_o: float = 0.002
    d_m: float = 0.002
    data_seed: int = 0
    profile: str = "default"
    profile_seed: int = 0
    nlat: int = 48
    r0: float = 1.0
    kappa: float = 0.5
    s_end: float = 10.0
    h0: float = 0.05
    stretch: bool = True
    h_max: float = 10.0
    n: int = 2
    p: float = 2.0
    guard: float | None = None
    lmax_data: int = 4
    ceilings: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown ensemble kind {self.kind!r}")
        if self.profile not in ("default", "random", "background"):
            raise ConfigError(f"unknown profile kind {self.profile!r}")
        if self.n_runs < 0:
            raise ConfigError("n_runs must be non-negative")

    @property
    def ceiling_map(self) -> dict:
        out = dict(CEILINGS)
        out.update(dict(self.ceilings))
        return out

    def evolution_config(self) -> EvolutionConfig:
        # pair members only need their initial norms, which the pair ledger records
        return EvolutionConfig(s_end=self.s_end, h0=self.h0, stretch=self.stretch,
                               h_max=self.h_max, n=self.n, p=self.p, guard=self.guard,
                               diagnostics=self.kind == "foliation")

    def budgets(self) -> dict:
        return {"epsilon": self.epsilon, "delta_o": self.delta_o, "delta_m": self.delta_m,
                "d_o": self.d_o, "d_m": self.d_m}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ceilings"] = [list(c) for c in self.ceilings]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        d = dict(d)
        d["ceilings"] = tuple(tuple(c) for c in d.get("ceilings", ()))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def random_initial_data(grid: SphereGrid, rng: np.random.Generator, grad_budget: float,
                        mean_budget: float, order: int, p: float = 2.0, r0: float = 1.0,
                        lmax: int = 4, fill=(0.5, 1.0)) -> ScalarField:
    """Random band-limited leaf with ``|grad f|_{W^{order,p}}`` and mean inside the budgets.

    The gradient norm is set to ``U(fill) * grad_budget * r0`` and the mean
    to ``U(-1, 1) * mean_budget * r0``.
    """
    c = np.zeros(grid.coeff_shape)
    for l in range(1, lmax + 1):
        c[:, l, :l + 1] = rng.standard_normal((2, l + 1)) / (l + 1.0) ** 2
    c[1, :, 0] = 0.0
    g = gradient_norm(ScalarField.from_coeffs(grid, c), order, p)
    target = rng.uniform(*fill) * grad_budget * r0
    c *= target / g if g > 0 else 0.0
    c[0, 0, 0] = rng.uniform(-1.0, 1.0) * mean_budget * r0 * math.sqrt(4.0 * math.pi)
    return ScalarField.from_coeffs(grid, c)


def member_profile(spec: EnsembleSpec, i: int) -> PerturbationProfile:
    if spec.profile == "background" or spec.epsilon == 0:
        return PerturbationProfile.background()
    if spec.profile == "random":
        return PerturbationProfile.random(spec.epsilon, seed=spec.profile_seed + i)
    return PerturbationProfile.default(spec.epsilon)


def member_data(spec: EnsembleSpec, grid: SphereGrid, i: int):
    """Initial data of run ``i``: ``f0`` or ``(f1_0, f2_0)``."""
    rng = np.random.default_rng([spec.data_seed, i])
    r0, n, p, L = spec.r0, spec.n, spec.p, spec.lmax_data
    if spec.kind == "foliation":
        return random_initial_data(grid, rng, spec.delta_o, spec.delta_m, n + 1, p, r0, L)
    if spec.kind == "perturbation":
        f1 = random_initial_data(grid, rng, spec.delta_o, spec.delta_m, n + 1, p, r0, L,
                                 fill=(0.3, 0.6))
        d = random_initial_data(grid, rng, spec.d_o, spec.d_m, n, p, r0, L)
        return f1, f1 + d
    c2 = rng.uniform(-1.0, 1.0) * spec.delta_m * r0
    d = random_initial_data(grid, rng, spec.d_o, spec.d_m, n + 1, p, r0, L)
    f2 = ScalarField.constant(grid, c2)
    return ScalarField.from_coeffs(grid, f2.coeffs - d.coeffs), f2


_GRIDS: dict = {}


def _grid(nlat):
    if nlat not in _GRIDS:
        _GRIDS[nlat] = SphereGrid(nlat)
    return _GRIDS[nlat]


def run_member(spec: EnsembleSpec, i: int) -> dict:
    """Run member ``i`` and return a plain record (status, ledger rows, initial norms)."""
    grid = _grid(spec.nlat)
    metric = PerturbedMetric(member_profile(spec, i),
                             SchwarzschildParams(spec.r0, spec.kappa), grid)
    cfg = spec.evolution_config()
    rec = {"index": i, "kind": spec.kind, "epsilon": metric.epsilon}
    try:
        if spec.kind == "foliation":
            traj = evolve(metric, member_data(spec, grid, i), cfg)
            rec.update(status=traj.status, ledger=traj.ledger)
        else:
            f1, f2 = member_data(spec, grid, i)
            run = run_full(metric, f1, f2, cfg, spec.budgets())
            rec.update(status=run.status, ledger=run.ledger, f2_constant=run.f2_constant,
                       reports=run.reports)
    except NullFolError as exc:
        rec.update(status=type(exc).__name__, ledger=[], error=str(exc))
    return rec


def run_ensemble(spec: EnsembleSpec, workers: int = 1) -> list:
    """Run every member; parallel over members when ``workers > 1``."""
    idx = list(range(spec.n_runs))
    if workers > 1 and len(idx) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_member, [spec] * len(idx), idx))
    return [run_member(spec, i) for i in idx]


# ----------------------------------------------------------------------
# Certificates
# ----------------------------------------------------------------------


@dataclass
class Certificate:
    """Measured constants of one estimate against configured ceilings.

    ``status`` is ``pass``, ``fail`` or ``inconclusive`` (some run aborted or
    no run carried information).
    """

    theorem: str
    constants: dict
    ceilings: dict
    budgets: dict
    status: str
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self):
        return None if self.status == "inconclusive" else self.status == "pass"

    def to_dict(self) -> dict:
        return {"theorem": self.theorem, "constants": dict(self.constants),
                "ceilings": dict(self.ceilings), "budgets": dict(self.budgets),
                "status": self.status, "passed": self.passed, "metadata": dict(self.metadata)}


def fit_two_constants(y, a, b, ceil_a: float, ceil_b: float):
    """Constants ``(c_a, c_b) >= 0`` with ``y_i <= c_a a_i + c_b b_i`` for every run.

    A first linear program minimises ``t = max(c_a / ceil_a, c_b / ceil_b)``;
    ``t <= 1`` exactly when some admissible pair lies within both ceilings.
    In that case the reported pair minimises ``c_a / ceil_a + c_b / ceil_b``
    inside the ceilings, otherwise it is the minimax pair. Rows with
    ``y_i = 0`` impose nothing. Returns ``(c_a, c_b, t)``.
    """
    y, a, b = (np.asarray(v, float) for v in (y, a, b))
    keep = y > 0
    if not np.any(keep):
        return 0.0, 0.0, 0.0
    y, a, b = y[keep], a[keep], b[keep]
    A = -np.stack([a / y, b / y, np.zeros_like(y)], axis=1)
    A = np.vstack([A, [1.0, 0.0, -ceil_a], [0.0, 1.0, -ceil_b]])
    rhs = np.concatenate([-np.ones(len(y)), [0.0, 0.0]])
    first = linprog([0.0, 0.0, 1.0], A_ub=A, b_ub=rhs, bounds=[(0, None)] * 3, method="highs")
    if first.status != 0:
        return math.inf, math.inf, math.inf
    t = float(first.x[2])
    if t > 1.0:
        return float(first.x[0]), float(first.x[1]), t
    second = linprog([1.0 / ceil_a, 1.0 / ceil_b, 0.0], A_ub=A, b_ub=rhs,
                     bounds=[(0, None), (0, None), (0, 1.0)], method="highs")
    x = second.x if second.status == 0 else first.x
    return float(x[0]), float(x[1]), t


def decay_exponent(s, F, r0: float = 1.0, lo: float = 1.0, hi: float = 100.0):
    """Least-squares exponent ``q`` in ``max|F| ~ (r0 + s)^(-q)`` over ``[lo r0, hi r0]``."""
    s, F = np.asarray(s, float), np.asarray(F, float)
    sel = (s >= lo * r0 - 1e-12) & (s <= hi * r0 + 1e-9) & (F > 0)
    if np.count_nonzero(sel) < 3:
        return math.nan
    slope = np.polyfit(np.log(r0 + s[sel]), np.log(F[sel]), 1)[0]
    return float(-slope)


def _col(rows, key):
    return np.array([r[key] for r in rows], float)


def _status(ok, incomplete):
    return "inconclusive" if incomplete else ("pass" if ok else "fail")


def certify_records(spec: EnsembleSpec, records: list) -> list:
    """Certificates computed from run records (ledger rows only)."""
    ceil = spec.ceiling_map
    r0, eps = spec.r0, spec.epsilon
    done = [r for r in records if r["status"] == COMPLETED and r["ledger"]]
    incomplete = len(done) < len(records) or not records
    meta = {"n_runs": len(records), "completed": len(done),
            "statuses": sorted({r["status"] for r in records}),
            "data_seed": spec.data_seed, "profile": spec.profile,
            "profile_seed": spec.profile_seed, "kind": spec.kind}
    bud = spec.budgets()
    certs = []
    if spec.kind == "foliation":
        ratios, ys, a, b, drift, guard, expo = [], [], [], [], [], [], []
        for r in done:
            rows = r["ledger"]
            g, mf = _col(rows, "grad_norm"), _col(rows, "mean_f")
            do, dm = g[0] / r0, abs(mf[0]) / r0
            if g[0] >= 1e-12 * r0:
                ratios.append(float(np.max(g) / g[0]))
            ys.append(float(np.max(np.abs(mf))))
            a.append(abs(mf[0]))
            b.append(g[0] ** 2 / r0)
            den = (eps * dm * do + do * do) * r0
            if den > 0:
                drift.append(float(np.max(np.abs(mf - mf[0]))) / den)
            if do > 0:
                guard.append(float((np.max(_col(rows, "max_abs_f")) / r0 - dm) / do))
            q = decay_exponent(_col(rows, "s"), _col(rows, "max_abs_F"), r0)
            if not math.isnan(q):
                expo.append(q)
        c_o = max(ratios) if ratios else 1.0
        certs.append(Certificate("foliation-gradient", {"c_o": c_o}, {"c_o": ceil["c_o"]}, bud,
                                 _status(c_o <= ceil["c_o"], incomplete),
                                 dict(meta, skipped_zero_gradient=len(done) - len(ratios))))
        cmm, cmo, t = fit_two_constants(ys, a, b, ceil["c_mm"], ceil["c_mo"])
        certs.append(Certificate("foliation-mean", {"c_mm": cmm, "c_mo": cmo, "t": t},
                                 {"c_mm": ceil["c_mm"], "c_mo": ceil["c_mo"]}, bud,
                                 _status(t <= 1.0, incomplete), dict(meta)))
        if expo:
            q = min(expo)
            certs.append(Certificate("foliation-decay", {"decay_exponent": q, "mean_exponent":
                                                   float(np.mean(expo))},
                                     {"decay_exponent": ceil["decay_exponent"]}, bud,
                                     _status(q >= ceil["decay_exponent"], incomplete),
                                     dict(meta, fitted_runs=len(expo))))
        cd = max(drift) if drift else 0.0
        certs.append(Certificate("foliation-drift", {"c_drift": cd}, {"c_drift": ceil["c_drift"]}, bud,
                                 _status(cd <= ceil["c_drift"], incomplete), dict(meta)))
        cg = max(guard) if guard else 0.0
        hit = any(r["status"] != COMPLETED for r in records)
        cond = spec.delta_m + cg * spec.delta_o < (spec.guard or 0.9) * spec.kappa
        certs.append(Certificate("foliation-guard", {"c_guard": cg, "condition_met": bool(cond)},
                                 {}, bud, _status(not hit, False),
                                 dict(meta, guard_fraction=spec.guard or 0.9)))
        return certs

    ddo, ddm, ao, bo, am, bm, errs, lemma, linm, np1 = ([] for _ in range(10))
    for r in done:
        rows = r["ledger"]
        r0w = rows[0]
        do = max(r0w["f1_grad_norm"], r0w["f2_grad_norm"]) / r0
        dm = max(abs(r0w["f1_mean"]), abs(r0w["f2_mean"])) / r0
        dd_o, dd_m = r0w["dd_grad_norm"] / r0, abs(r0w["mean_dd_f"]) / r0
        ddo.append(float(np.max(_col(rows, "dd_grad_norm"))))
        ao.append(dd_o * r0)
        bo.append((do * do + eps * do) * dd_m * r0)
        ddm.append(float(np.max(np.abs(_col(rows, "mean_dd_f")))))
        am.append(dd_m * r0)
        bm.append((do + eps * dm) * dd_o * r0)
        den = ((do + eps * dm) * dd_o + (do * do + eps * do) * dd_m) * r0
        e = max(float(np.max(_col(rows, "err_grad_norm"))),
                float(np.max(np.abs(_col(rows, "mean_err")))))
        if den > 0:
            errs.append(e / den)
        elif e > 0:
            errs.append(math.inf)
        for m in range(spec.n + 1):
            col = _col(rows, f"lap_lin_norm_{m}")
            if col[0] > 0:
                lemma.append(float(np.max(col) / col[0]))
        ml = _col(rows, "mean_lin")
        linm.append(float(np.max(np.abs(ml - ml[0]))))
        if r.get("f2_constant"):
            col = _col(rows, "dd_grad_norm_np1")
            if col[0] > 0:
                np1.append(float(np.max(col) / col[0]))
        elif "dd_grad_norm_np1" in r0w:
            raise AssertionError("order n+1 perturbation bound claimed for a non-constant leaf")
    co, com, t1 = fit_two_constants(ddo, ao, bo, ceil["dd_c_o"], ceil["dd_c_om"])
    certs.append(Certificate("perturbation-gradient", {"c_o": co, "c_om": com, "t": t1},
                             {"c_o": ceil["dd_c_o"], "c_om": ceil["dd_c_om"]}, bud,
                             _status(t1 <= 1.0, incomplete), dict(meta)))
    cm, cmo, t2 = fit_two_constants(ddm, am, bm, ceil["dd_c_m"], ceil["dd_c_mo"])
    certs.append(Certificate("perturbation-mean", {"c_m": cm, "c_mo": cmo, "t": t2},
                             {"c_m": ceil["dd_c_m"], "c_mo": ceil["dd_c_mo"]}, bud,
                             _status(t2 <= 1.0, incomplete), dict(meta)))
    if spec.kind == "constant":
        ratio = max(np1) if np1 else 1.0
        certs.append(Certificate("perturbation-gradient-np1", {"ratio_np1": ratio},
                                 {"ratio_np1": ceil["dd_np1_ratio"]}, bud,
                                 _status(ratio <= ceil["dd_np1_ratio"], incomplete), dict(meta)))
    ce = max(errs) if errs else 0.0
    certs.append(Certificate("linearisation-error", {"c": ce}, {"c": ceil["err_c"]}, bud,
                             _status(ce <= ceil["err_c"], incomplete), dict(meta)))
    cl = max(lemma) if lemma else 1.0
    certs.append(Certificate("linearised-laplacian", {"c": cl}, {"c": ceil["lemma_c"]}, bud,
                             _status(cl <= ceil["lemma_c"], incomplete), dict(meta)))
    lm = max(linm) if linm else 0.0
    certs.append(Certificate("linearised-mean", {"drift": lm},
                             {"drift": ceil["lin_mean_drift"] * r0}, bud,
                             _status(lm <= ceil["lin_mean_drift"] * r0, incomplete), dict(meta)))
    return certs


def certify(spec: EnsembleSpec, workers: int = 1, strict: bool = False):
    """Run an ensemble and issue its certificates.

    Returns
    -------
    certificates : list of Certificate
    records : list of dict

    Raises
    ------
    EnsembleIncomplete
        With ``strict=True``, when some run aborted; the certificates are
        attached as ``exc.certificates`` and are marked inconclusive.
    """
    records = run_ensemble(spec, workers)
    certs = certify_records(spec, records)
    if strict and any(r["status"] != COMPLETED for r in records):
        exc = EnsembleIncomplete(f"{sum(r['status'] != COMPLETED for r in records)} of "
                                 f"{len(records)} runs aborted")
        exc.certificates = certs
        exc.records = records
        raise exc
    return certs, records


def format_certificates(certs: list) -> str:
    """Plain-text table of certificates."""
    lines = [f"{'estimate':<26} {'status':<13} constants (ceilings)"]
    for c in certs:
        parts = []
        for k, v in c.constants.items():
            if k in c.ceilings:
                parts.append(f"{k}={v:.4g} ({c.ceilings[k]:.4g})")
            elif isinstance(v, bool):
                parts.append(f"{k}={v}")
            else:
                parts.append(f"{k}={v:.4g}")
        lines.append(f"{c.theorem:<26} {c.status:<13} " + ", ".join(parts))
    return "\n".join(lines)
