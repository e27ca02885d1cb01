"""Schwarzschild background in double null coordinates and its perturbations.

Coordinates are ``(us, s, theta, phi)`` with ``r0 = 2m`` the horizon radius.
The area radius of the background solves the implicit relation

.. math::

    (r - r_0)\\, e^{r/r_0} = s\\, e^{(\\bar u_s + s + r_0)/r_0},

and the lapse is :math:`\\Omega_S^2 = \\frac{s + r_0}{r}\\frac{r - r_0}{s}`.

The perturbed family keeps the background's double null form and modifies
the coefficients multiplicatively,

.. math::

    \\Omega^2 = \\Omega_S^2 \\exp(2\\epsilon \\tfrac{r_0}{r}\\chi_\\Omega),\\quad
    b = \\epsilon \\tfrac{r_0 \\bar u_s}{r^3}\\chi_b,\\quad
    \\not g = r^2(\\mathring g + \\epsilon\\chi_g),

with shape functions given by low-degree harmonic series whose coefficients
are polynomials in ``us / r0``. Every coefficient is evaluated together with
its ``us``-derivatives (jets of order ``<= 2``) and its round covariant
derivatives (order ``<= 2`` for evolution, deeper for validation). No
derivative in ``s`` is ever formed.

All internal computations use ``r0 = 1`` units; inputs and outputs carry
physical units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainError, NoConvergence, OutOfDomain, ProfileError
from .sphere import SphereGrid, ScalarField

try:  # pragma: no cover - exercised on 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml
import tomli_w

_S_BAND = 1e-8


@dataclass(frozen=True)
class SchwarzschildParams:
    """Background parameters.

    Parameters
    ----------
    r0 : float
        Horizon radius ``2m``.
    kappa : float
        Half-width of the coordinate neighbourhood in units of ``r0``.
    """

    r0: float = 1.0
    kappa: float = 0.5

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")

    def in_domain(self, us, s) -> np.ndarray:
        """Inside the coordinate neighbourhood and on the regular side of ``r = 0``."""
        us, s = np.asarray(us, float), np.asarray(s, float)
        box = (s > -self.kappa * self.r0) & (np.abs(us) < self.kappa * self.r0)
        with np.errstate(over="ignore"):
            regular = (s >= 0) | (s / self.r0 * np.exp((us + s) / self.r0 + 1.0) > -1.0)
        return box & regular

    def check_domain(self, us, s, exc=DomainError):
        if not np.all(self.in_domain(us, s)):
            raise exc(f"point outside the kappa-neighbourhood (kappa={self.kappa})")


@dataclass(frozen=True)
class AreaRadiusSolution:
    r: float
    us: float
    s: float
    residual: float


# ----------------------------------------------------------------------
# Dimensionless area radius rho = r / r0 as a function of (u, sigma)
# ----------------------------------------------------------------------


def _delta(u, sigma, maxiter=200):
    """Solve ``(rho - 1) e^rho = sigma e^(u + sigma + 1)`` for ``delta = rho - 1``.

    Working with ``delta`` keeps full relative precision near ``sigma = 0``.
    Returns ``(delta, residual)``, the residual being that of the original
    relation relative to ``max(1, |rhs|)``.
    """
    u, sigma = np.broadcast_arrays(np.asarray(u, float), np.asarray(sigma, float))
    delta = np.zeros(u.shape)
    res = np.zeros(u.shape)
    pos, neg = sigma > 0, sigma < 0
    if np.any(pos):
        sp, up = sigma[pos], u[pos]
        # log form: log(delta) + delta = L, increasing and concave in delta
        L = np.log(sp) + up + sp
        lo = np.zeros_like(sp)
        hi = np.logaddexp(0.0, L)
        x = np.minimum(sp * np.exp(np.minimum(up, 700.0)), hi)
        for _ in range(maxiter):
            phi = np.log(x) + x - L
            lo = np.where(phi < 0, x, lo)
            hi = np.where(phi > 0, x, hi)
            xn = x - phi * x / (1.0 + x)
            bad = ~((xn > lo) & (xn < hi))
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            done = np.abs(xn - x) <= 4e-16 * xn
            x = xn
            if np.all(done):
                break
        phi = np.log(x) + x - L
        small = L + 1.0 <= 0.0
        direct = np.e * np.abs(x * np.exp(np.where(small, x, 0.0)) - np.exp(np.where(small, L, 0.0)))
        delta[pos] = x
        res[pos] = np.where(small, direct, np.abs(np.expm1(phi)))
    if np.any(neg):
        sn, un = sigma[neg], u[neg]
        c = sn * np.exp(un + sn)
        if np.any(c * np.e <= -1.0):
            raise DomainError("no positive area radius: (us, s) lies beyond r = 0")
        lo, hi = -np.ones_like(sn), np.zeros_like(sn)
        x = sn * np.exp(un)
        x = np.where((x <= -1) | (x >= 0), 0.5 * c, x)
        for _ in range(maxiter):
            g = x * np.exp(x) - c
            lo = np.where(g < 0, x, lo)
            hi = np.where(g > 0, x, hi)
            xn = x - g / ((1.0 + x) * np.exp(x))
            bad = ~((xn > lo) & (xn < hi))
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            done = np.abs(xn - x) <= 4e-16 * np.abs(xn)
            x = xn
            if np.all(done):
                break
        delta[neg] = x
        res[neg] = np.e * np.abs(x * np.exp(x) - c) / np.maximum(1.0, np.e * np.abs(c))
    if np.any(~np.isfinite(delta)) or np.any(res > 1e-12):
        raise NoConvergence(f"area radius residual {np.max(res):.3e} above 1e-12")
    return delta, res


def _rho(u, sigma):
    """Dimensionless area radius ``rho = r / r0`` and relation residual."""
    delta, res = _delta(u, sigma)
    return 1.0 + delta, res


def area_radius(params: SchwarzschildParams, us, s, check: bool = True):
    """Vectorised area radius ``r(us, s)``; returns ``(r, residual)``."""
    if check:
        params.check_domain(us, s)
    rho, res = _rho(np.asarray(us, float) / params.r0, np.asarray(s, float) / params.r0)
    return params.r0 * rho, res


def solve_area_radius(params: SchwarzschildParams, us: float, s: float) -> AreaRadiusSolution:
    """Area radius of the background at one event.

    Newton iteration, safeguarded by a shrinking bracket, on the implicit
    relation. For ``s > 0`` the logarithm of the relation is solved, which is
    monotone and concave in ``r`` and avoids overflow at large ``s``.

    Raises
    ------
    DomainError
        Outside the kappa-neighbourhood.
    NoConvergence
        If the relative residual stays above ``1e-12``.
    """
    r, res = area_radius(params, us, s)
    return AreaRadiusSolution(float(r), float(us), float(s), float(res))


def _omega_s_sq_dimless(u, sigma, delta):
    sigma = np.asarray(sigma, float)
    band = np.abs(sigma) < _S_BAND
    safe = np.where(band, 1.0, sigma)
    ratio = np.where(band, np.exp(u + sigma - delta), delta / safe)
    return (sigma + 1.0) / (1.0 + delta) * ratio


def schwarzschild_omega_sq(params: SchwarzschildParams, us, s):
    """Background lapse ``Omega_S^2 = (s + r0)/r * (r - r0)/s``.

    Within ``|s| < 1e-8 r0`` the removable quotient ``(r - r0)/s`` is replaced
    by its exact equivalent ``exp((us + s + r0 - r)/r0) / r0``.
    """
    u, sigma = np.asarray(us, float) / params.r0, np.asarray(s, float) / params.r0
    params.check_domain(us, s)
    delta, _ = _delta(u, sigma)
    out = _omega_s_sq_dimless(u, sigma, delta)
    return float(out) if out.ndim == 0 else out


def schwarzschild_omega_sq_alt(params: SchwarzschildParams, us, s):
    """Alternate closed form ``(s + r0)/r * exp((us + s + r0 - r)/r0)``."""
    params.check_domain(us, s)
    r, _ = area_radius(params, us, s)
    out = (np.asarray(s) + params.r0) / r * np.exp((np.asarray(us) + s + params.r0 - r) / params.r0)
    return float(out) if np.ndim(out) == 0 else out


# ----------------------------------------------------------------------
# Perturbation profiles
# ----------------------------------------------------------------------

#: Channel name -> (kind, minimal degree). Vector and tensor shapes are built
#: from scalar potentials: chi_b = grad(b_grad) + x cross grad(b_curl) and
#: chi_g = g_trace * round + tracefree hess(g_hess) + sym grad(x cross grad g_curl).
CHANNELS = {
    "omega": ("omega", 0),
    "b_grad": ("b", 1),
    "b_curl": ("b", 1),
    "g_trace": ("g", 0),
    "g_hess": ("g", 2),
    "g_curl": ("g", 2),
}
MAX_POWER = 4


@dataclass(frozen=True)
class HarmonicTerm:
    """One term ``coeff * (us/r0)**power * Y_{l,m}`` of a channel potential."""

    channel: str
    power: int
    l: int
    m: int
    coeff: float


_DEFAULT_TERMS = (
    ("omega", 0, 1, 0, 0.06), ("omega", 0, 2, 1, 0.015), ("omega", 1, 1, 1, 0.02),
    ("b_grad", 0, 1, 0, 0.012), ("b_grad", 1, 2, -1, 0.002), ("b_curl", 0, 2, 2, 0.002),
    ("g_trace", 0, 1, 1, 0.03), ("g_trace", 1, 0, 0, 0.06), ("g_hess", 0, 2, 0, 0.01),
    ("g_curl", 0, 2, 1, 0.01),
)


@dataclass(frozen=True)
class PerturbationProfile:
    """Shape data of an epsilon-close metric.

    Parameters
    ----------
    epsilon : float
        Closeness parameter.
    terms : tuple of HarmonicTerm
        Harmonic series of the channel potentials.
    seed : int, optional
        Seed used when the terms were generated randomly.
    name : str
        Label echoed in reports.
    """

    epsilon: float = 0.0
    terms: tuple = ()
    seed: int | None = None
    name: str = "custom"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ProfileError("epsilon must be nonnegative")
        terms = tuple(t if isinstance(t, HarmonicTerm) else HarmonicTerm(*t) for t in self.terms)
        for t in terms:
            if t.channel not in CHANNELS:
                raise ProfileError(f"unknown channel {t.channel!r}")
            lmin = CHANNELS[t.channel][1]
            if not (lmin <= t.l and abs(t.m) <= t.l):
                raise ProfileError(f"invalid degree/order ({t.l}, {t.m}) for channel {t.channel}")
            if not 0 <= t.power <= MAX_POWER:
                raise ProfileError(f"power {t.power} outside [0, {MAX_POWER}]")
            if not math.isfinite(t.coeff):
                raise ProfileError("non-finite coefficient")
        object.__setattr__(self, "terms", terms)

    # constructors ------------------------------------------------------
    @classmethod
    def background(cls) -> "PerturbationProfile":
        return cls(0.0, (), None, "background")

    @classmethod
    def default(cls, epsilon: float = 0.01) -> "PerturbationProfile":
        """Library default: a fixed low-degree profile well inside the envelopes."""
        return cls(epsilon, tuple(HarmonicTerm(*t) for t in _DEFAULT_TERMS), None, "default")

    @classmethod
    def random(cls, epsilon: float = 0.01, seed: int = 0) -> "PerturbationProfile":
        """Default term structure with coefficients drawn from ``U(-a, a)``.

        ``a`` is the magnitude of the corresponding default coefficient, so
        the envelope margins of the default profile carry over.
        """
        rng = np.random.default_rng(seed)
        terms = tuple(HarmonicTerm(c, p, l, m, float(a * rng.uniform(-1.0, 1.0)))
                      for c, p, l, m, a in _DEFAULT_TERMS)
        return cls(epsilon, terms, int(seed), "random")

    @classmethod
    def adversarial(cls, epsilon: float = 0.01, amplitude: float = 10.0) -> "PerturbationProfile":
        """Profile whose lapse shape exceeds the envelopes by construction."""
        return cls(epsilon, (HarmonicTerm("omega", 0, 0, 0, amplitude * math.sqrt(4 * math.pi)),
                             HarmonicTerm("omega", 0, 1, 0, amplitude)), None, "adversarial")

    def with_epsilon(self, epsilon: float) -> "PerturbationProfile":
        return PerturbationProfile(epsilon, self.terms, self.seed, self.name)

    def channel_terms(self, kind: str):
        return [t for t in self.terms if CHANNELS[t.channel][0] == kind]

    # serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        d = {"epsilon": float(self.epsilon), "name": self.name}
        if self.seed is not None:
            d["seed"] = int(self.seed)
        chans = {}
        for t in self.terms:
            chans.setdefault(t.channel, []).append([t.power, t.l, t.m, float(t.coeff)])
        d["channels"] = chans
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationProfile":
        try:
            epsilon = float(d.get("epsilon", 0.0))
            kind = d.get("kind", "table")
            seed = d.get("seed")
            if kind == "default":
                return cls.default(epsilon)
            if kind == "background":
                return cls.background()
            if kind == "random":
                return cls.random(epsilon, int(seed or 0))
            if kind == "adversarial":
                return cls.adversarial(epsilon, float(d.get("amplitude", 10.0)))
            if kind != "table":
                raise ProfileError(f"unknown profile kind {kind!r}")
            terms = []
            for ch, rows in d.get("channels", {}).items():
                for row in rows:
                    p, l, m, c = row
                    terms.append(HarmonicTerm(ch, int(p), int(l), int(m), float(c)))
            return cls(epsilon, tuple(terms), None if seed is None else int(seed), d.get("name", "custom"))
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ProfileError):
                raise
            raise ProfileError(f"malformed profile table: {exc}") from exc

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "PerturbationProfile":
        return cls.from_dict(_toml.loads(text))


# ----------------------------------------------------------------------
# Jets: lists [q, d_u q, d_u^2 q] combined with the Leibniz rule
# ----------------------------------------------------------------------

_BINOM = ((1,), (1, 1), (1, 2, 1))


def _mul(a, b):
    return a * b


def _lmul(a, b, op=_mul):
    M = min(len(a), len(b))
    out = []
    for m in range(M):
        acc = None
        for j in range(m + 1):
            term = op(a[j], b[m - j])
            if _BINOM[m][j] != 1:
                term = _BINOM[m][j] * term
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def _ladd(a, b):
    return [x + y for x, y in zip(a, b)]


def _lexp(a):
    e = np.exp(a[0])
    out = [e]
    if len(a) > 1:
        out.append(e * a[1])
    if len(a) > 2:
        out.append(e * (a[2] + a[1] ** 2))
    return out


def _rho_jet(rho, M):
    j = [rho, (rho - 1.0) / rho, (rho - 1.0) / rho ** 3]
    return j[: M + 1]


def _inv_jet(a):
    q = 1.0 / a[0]
    out = [q]
    if len(a) > 1:
        out.append(-a[1] * q * q)
    if len(a) > 2:
        out.append(2.0 * a[1] ** 2 * q ** 3 - a[2] * q * q)
    return out


def _assemble(cols, M, K, scale):
    """Transpose per-``k`` jets into ``Q[m][k]``; entries beyond a jet are ``None``."""
    return [[cols[k][m] * scale(m) if m < len(cols[k]) else None for k in range(K + 1)]
            for m in range(M + 1)]


def _ein(spec):
    return lambda *ops: np.einsum(spec, *ops)


# ----------------------------------------------------------------------
# Basis tensors of the shape functions
# ----------------------------------------------------------------------


def _potential(grid, terms):
    """Grid values of ``sum coeff * Y_lm`` per power, as dict power -> values."""
    out = {}
    for t in terms:
        v = out.setdefault(t.power, np.zeros(grid.shape))
        v += t.coeff * ScalarField.harmonic(grid, t.l, t.m).values
    return out


def _channel_basis(grid: SphereGrid, profile: PerturbationProfile, kind: str, kmax: int):
    """Ambient shape tensors and their covariant derivatives.

    Returns dict ``power -> [nabla^0 chi_d, ..., nabla^kmax chi_d]``.
    """
    by_power = {}
    xh = grid.x_hat
    P = np.eye(3)[:, :, None, None] - xh[:, None] * xh[None, :]
    for ch, (k, _) in CHANNELS.items():
        if k != kind:
            continue
        for power, vals in _potential(grid, [t for t in profile.terms if t.channel == ch]).items():
            if ch == "omega":
                T = vals
            elif ch == "b_grad":
                T = grid.gradient(vals)
            elif ch == "b_curl":
                T = np.cross(xh, grid.gradient(vals), axis=0)
            elif ch == "g_trace":
                T = vals * P
            elif ch == "g_hess":
                H = grid.covariant_derivative(grid.gradient(vals))
                H = 0.5 * (H + np.swapaxes(H, 0, 1))
                T = H - 0.5 * np.einsum("kkxy->xy", H) * P
            else:  # g_curl
                V = np.cross(xh, grid.gradient(vals), axis=0)
                D = grid.covariant_derivative(V)
                T = 0.5 * (D + np.swapaxes(D, 0, 1))
            by_power[power] = by_power.get(power, 0.0) + T
    out = {}
    for power, T in sorted(by_power.items()):
        ders = [np.asarray(T, float)]
        for _ in range(kmax):
            ders.append(grid.covariant_derivative(ders[-1]))
        out[power] = ders
    return out


def _u_jets(basis, u, M, K):
    """Jets ``J[m][k] = sum_d d!/(d-m)! u^(d-m) nabla^k chi_d`` of a channel."""
    J = [[0.0] * (K + 1) for _ in range(M + 1)]
    for d, ders in basis.items():
        for m in range(min(M, d) + 1):
            c = math.factorial(d) // math.factorial(d - m)
            w = c * u ** (d - m) if d - m else np.full(np.shape(u), float(c))
            for k in range(K + 1):
                J[m][k] = J[m][k] + w * ders[k]
    ref = next(iter(basis.values()))
    for m in range(M + 1):
        for k in range(K + 1):
            if np.ndim(J[m][k]) == 0:
                J[m][k] = np.zeros(np.shape(ref[k]))
    return J


def _tangent_inverse(M, xh):
    """Inverse of a tangent symmetric tensor on the tangent plane."""
    A = M + xh[:, None] * xh[None, :]
    # cofactors of the symmetric 3x3 blocks, vectorised over points
    c00 = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    c01 = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    c02 = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    c11 = A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
    c12 = A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]
    c22 = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    det = A[0, 0] * c00 + A[0, 1] * c01 + A[0, 2] * c02
    inv = np.stack([np.stack([c00, c01, c02]), np.stack([c01, c11, c12]),
                    np.stack([c02, c12, c22])]) / det
    return inv - xh[:, None] * xh[None, :]


@dataclass
class MetricSample:
    """Metric coefficients and their derivatives at a set of events.

    Each coefficient is stored as a nested list ``Q[m][k]`` holding the
    ``m``-th ``us``-derivative of its ``k``-th round covariant derivative as an
    ambient tensor with trailing point dimensions. ``inv`` holds the
    contravariant combination ``Omega^2 gslash^{-1}``. There is deliberately
    no field for derivatives in ``s``.

    Attributes
    ----------
    omega_sq, b, gslash, inv : list of list of ndarray
    r : ndarray
        Background area radius at each event.
    omega_s_sq : ndarray
        Background lapse at each event.
    e_theta, e_phi : ndarray
        Orthonormal frame used by the dyad accessors.
    """

    omega_sq: list
    b: list
    gslash: list
    inv: list
    r: np.ndarray
    omega_s_sq: np.ndarray
    e_theta: np.ndarray = field(repr=False)
    e_phi: np.ndarray = field(repr=False)

    def _dyad_vec(self, v):
        return np.stack([np.sum(self.e_theta * v, axis=0), np.sum(self.e_phi * v, axis=0)])

    def _dyad_ten(self, T):
        e = np.stack([self.e_theta, self.e_phi])
        return np.einsum("ia...,ab...,jb...->ij...", e, T, e)

    @property
    def b_dyad(self):
        """``b`` in orthonormal-frame components."""
        return self._dyad_vec(self.b[0][0])

    @property
    def gslash_dyad(self):
        return self._dyad_ten(self.gslash[0][0])

    @property
    def d_us_omega_sq(self):
        return self.omega_sq[1][0]

    @property
    def d_us2_omega_sq(self):
        return self.omega_sq[2][0]

    @property
    def d_us_b(self):
        return self.b[1][0]

    @property
    def d_us2_b(self):
        return self.b[2][0]

    @property
    def d_us_gslash(self):
        return self.gslash[1][0]

    @property
    def d_us2_gslash(self):
        return self.gslash[2][0]


class PerturbedMetric:
    """Epsilon-close metric evaluable on graphs ``us = f(theta, phi)``.

    Parameters
    ----------
    profile : PerturbationProfile
    params : SchwarzschildParams
    grid : SphereGrid
        Angular grid on which the shape functions are tabulated.
    kmax : int
        Depth of tabulated angular derivatives of the shape functions.
    """

    def __init__(self, profile: PerturbationProfile | None = None,
                 params: SchwarzschildParams | None = None,
                 grid: SphereGrid | None = None, kmax: int = 2):
        self.profile = profile if profile is not None else PerturbationProfile.background()
        self.params = params if params is not None else SchwarzschildParams()
        self.grid = grid if grid is not None else SphereGrid()
        self.kmax = kmax
        eps = self.profile.epsilon
        self._basis = {}
        for kind in ("omega", "b", "g"):
            self._basis[kind] = (_channel_basis(self.grid, self.profile, kind, kmax)
                                 if eps > 0 else {})
        self._offgrid_cache = {}

    @property
    def epsilon(self):
        return self.profile.epsilon

    @property
    def is_background(self):
        return not any(self._basis.values())

    # ------------------------------------------------------------------
    def sample(self, us, s: float, orders=(2, 2), domain_exc=OutOfDomain,
               total: int | None = None) -> MetricSample:
        """Evaluate on the tabulation grid at heights ``us`` (grid-shaped or scalar).

        Parameters
        ----------
        us : float or ndarray of shape (nlat, nlon)
        s : float
        orders : (int, int)
            Highest ``us``-derivative and angular derivative needed.
        total : int, optional
            Skip entries ``[m][k]`` with ``m + k > total``; they are ``None``.
        """
        us = np.broadcast_to(np.asarray(us, float), self.grid.shape)
        frame = (self.grid.x_hat, self.grid.e_theta, self.grid.e_phi)
        return self._evaluate(us, s, orders, self._basis, frame, domain_exc, total)

    def sample_at(self, us, s: float, theta, phi, orders=(2, 2)) -> MetricSample:
        """Evaluate at arbitrary angular points (one-dimensional arrays)."""
        theta = np.atleast_1d(np.asarray(theta, float))
        phi = np.atleast_1d(np.asarray(phi, float))
        us = np.broadcast_to(np.asarray(us, float), theta.shape)
        key = (theta.tobytes(), phi.tobytes())
        basis = self._offgrid_cache.get(key)
        if basis is None:
            basis = {}
            for kind, b in self._basis.items():
                basis[kind] = {d: [self.grid.synthesize_at(self.grid.analysis(T), theta, phi)
                                   for T in ders] for d, ders in b.items()}
            self._offgrid_cache = {key: basis}
        st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
        frame = (np.stack([st * cp, st * sp, ct]), np.stack([ct * cp, ct * sp, -st]),
                 np.stack([-sp, cp, np.zeros_like(sp)]))
        return self._evaluate(us, s, orders, basis, frame, DomainError)

    # ------------------------------------------------------------------
    def _evaluate(self, us, s, orders, basis, frame, domain_exc, total=None):
        M, K = orders
        T = M + K if total is None else total
        Mk = [max(min(M, T - k), 0) for k in range(K + 1)]
        if K > self.kmax or M > 2:
            from .errors import UnsupportedOrder
            raise UnsupportedOrder(f"orders {orders} exceed (2, {self.kmax})")
        p = self.params
        r0 = p.r0
        p.check_domain(us, s, domain_exc)
        xh, eth, eph = frame
        pts = us.shape
        u, sigma = us / r0, float(s) / r0
        delta, _ = _delta(u, sigma)
        rho = 1.0 + delta
        eps = self.profile.epsilon
        rj = _rho_jet(rho, M)
        rj[1:] = [delta / rho, delta / rho ** 3][: M]
        q = _inv_jet(rj)
        omega_s = _omega_s_sq_dimless(u, sigma, delta)
        la = [np.log(omega_s), 1.0 / rho ** 2, -2.0 * delta / rho ** 4][: M + 1]
        A = _lexp(la)
        P = np.eye(3).reshape((3, 3) + (1,) * len(pts)) - xh[:, None] * xh[None, :]
        zero_vec = np.zeros((3,) + pts)

        # lapse
        if basis["omega"]:
            chi = _u_jets(basis["omega"], u, M, K)
            w = [[None] * (K + 1) for _ in range(M + 1)]
            for k in range(K + 1):
                col = _lmul(q, [chi[m][k] for m in range(Mk[k] + 1)])
                for m in range(Mk[k] + 1):
                    w[m][k] = 2.0 * eps * col[m]
            W = [[w[m][k] for m in range(Mk[k] + 1)] for k in range(K + 1)]
            E = [_lexp(W[0])]
            if K >= 1:
                E.append(_lmul(E[0], W[1]))
            if K >= 2:
                outer = _lmul(W[1], W[1], _ein("l...,k...->lk..."))
                E.append(_lmul(E[0], _ladd(W[2], outer)))
            om = [_lmul(A, E[k]) for k in range(K + 1)]
        else:
            om = [A] + [[np.zeros((3,) * k + pts) for _ in range(Mk[k] + 1)]
                        for k in range(1, K + 1)]
        omega_sq = _assemble(om, M, K, lambda m: 1.0 / r0 ** m)

        # shift
        if basis["b"] and eps > 0:
            chi = _u_jets(basis["b"], u, M, K)
            uj = [u, np.ones(pts), np.zeros(pts)][: M + 1]
            c = _lmul(uj, _lmul(q, _lmul(q, q)))
            bq = []
            for k in range(K + 1):
                bq.append(_lmul(c, [chi[m][k] for m in range(Mk[k] + 1)]))
            b = _assemble(bq, M, K, lambda m: eps / r0 ** (m + 1))
        else:
            b = _assemble([[np.zeros((3,) * (k + 1) + pts)] * (Mk[k] + 1) for k in range(K + 1)],
                          M, K, lambda m: 1.0)

        # sphere metric and its contravariant companion
        r2 = _lmul(rj, rj)
        h = [_lmul(_lmul(q, q), om[k]) for k in range(K + 1)]
        if basis["g"] and eps > 0:
            chi = _u_jets(basis["g"], u, M, K)
            Mt = [[eps * chi[m][k] for m in range(Mk[k] + 1)] for k in range(K + 1)]
            Mt[0][0] = P + Mt[0][0]
            gs = [_lmul(r2, Mt[k]) for k in range(K + 1)]
            N0 = _tangent_inverse(Mt[0][0], xh)
            nmn = _ein("ac...,cd...,db...->ab...")
            N = [N0]
            if M >= 1:
                N.append(-nmn(N0, Mt[0][1], N0))
            if M >= 2:
                N1M1 = np.einsum("ac...,cd...->ad...", N0, Mt[0][1])
                N.append(2.0 * np.einsum("ac...,cd...,db...->ab...", N1M1, N1M1, N0)
                         - nmn(N0, Mt[0][2], N0))
            Nk = [N]
            if K >= 1:
                NC = _lmul(N, Mt[1], _ein("ac...,lcd...->lad..."))
                A1 = _lmul(NC, N, _ein("lad...,db...->lab..."))
                Nk.append([-x for x in A1])
            if K >= 2:
                CN = _lmul(Mt[1], N, _ein("kcd...,db...->kcb..."))
                T = _lmul(A1, CN, _ein("lac...,kcb...->lkab..."))
                NCN2 = _lmul(_lmul(N, Mt[2], _ein("ac...,lkcd...->lkad...")), N,
                             _ein("lkad...,db...->lkab..."))
                Nk.append([t + np.swapaxes(t, 0, 1) - x for t, x in zip(T, NCN2)])
            G = [_lmul(h[0], Nk[0])]
            if K >= 1:
                G.append(_ladd(_lmul(h[1], Nk[0], _ein("l...,ab...->lab...")),
                               _lmul(h[0], Nk[1])))
            if K >= 2:
                t1 = _lmul(h[2], Nk[0], _ein("lk...,ab...->lkab..."))
                t2 = _lmul(h[1], Nk[1], _ein("l...,kab...->lkab..."))
                t3 = [np.swapaxes(x, 0, 1) for x in t2]
                t4 = _lmul(h[0], Nk[2])
                G.append([a + b_ + c_ + d for a, b_, c_, d in zip(t1, t2, t3, t4)])
        else:
            gs = [[r2[m] * P for m in range(M + 1)]] + [
                [np.zeros((3,) * (k + 2) + pts) for _ in range(Mk[k] + 1)] for k in range(1, K + 1)]
            G = [[h[0][m] * P for m in range(M + 1)]]
            if K >= 1:
                G.append(_lmul(h[1], [P] * (M + 1), _ein("l...,ab...->lab...")))
            if K >= 2:
                G.append(_lmul(h[2], [P] * (M + 1), _ein("lk...,ab...->lkab...")))
        gslash = _assemble(gs, M, K, lambda m: r0 ** (2 - m))
        inv = _assemble(G, M, K, lambda m: 1.0 / r0 ** (2 + m))
        return MetricSample(omega_sq, b, gslash, inv, r0 * rho, omega_s, eth, eph)


@lru_cache(maxsize=16)
def _cached_metric(profile, params, nlat, nlon, lmax, kmax):
    return PerturbedMetric(profile, params, SphereGrid(nlat, nlon, lmax), kmax)


def eval_metric(profile: PerturbationProfile, params: SchwarzschildParams, us, s,
                point, grid: SphereGrid | None = None, orders=(2, 2)) -> MetricSample:
    """Metric coefficients and derivatives at angular point(s) ``point = (theta, phi)``.

    Raises
    ------
    DomainError
        Outside the kappa-neighbourhood.
    ProfileError
        If the perturbed sphere metric fails to be positive definite.
    """
    g = grid if grid is not None else SphereGrid()
    metric = _cached_metric(profile, params, g.nlat, g.nlon, g.lmax, max(2, orders[1]))
    theta, phi = point
    sample = metric.sample_at(us, s, theta, phi, orders)
    ev = np.linalg.eigvalsh(np.moveaxis(sample.gslash_dyad, (0, 1), (-2, -1)))
    if np.any(ev <= 0):
        raise ProfileError("perturbed sphere metric is not positive definite")
    return sample


# ----------------------------------------------------------------------
# Envelope validation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSpec:
    """Lattice of events and derivative orders for :func:`validate_envelopes`."""

    us_values: tuple = (-0.4, -0.2, 0.0, 0.2, 0.4)
    s_values: tuple = (-0.2, 0.0, 0.5, 1.0, 10.0, 100.0)
    n: int = 2
    m_max: int = 2
    nlat: int = 24


@dataclass
class ValidationReport:
    """Maximal sampled ratio (measured / envelope) per inequality."""

    ratios: dict
    epsilon: float

    @property
    def passed(self) -> bool:
        return all(v < 1.0 for v in self.ratios.values())

    @property
    def failures(self):
        return [k for k, v in self.ratios.items() if not v < 1.0]

    @property
    def worst(self):
        k = max(self.ratios, key=self.ratios.get)
        return k, self.ratios[k]

    def to_dict(self):
        return {"epsilon": self.epsilon, "passed": self.passed,
                "failures": self.failures, "ratios": dict(self.ratios)}


def _tnorm(T, rank):
    return np.sqrt(np.sum(T ** 2, axis=tuple(range(rank)))) if rank else np.abs(T)


def _ratio(measured, envelope):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(measured == 0, 0.0, measured / envelope)
    return float(np.max(r))


def validate_envelopes(profile: PerturbationProfile, params: SchwarzschildParams | None = None,
                       sample_spec: SampleSpec | None = None) -> ValidationReport:
    """Sample the closeness inequalities on a lattice of events.

    For every angular derivative order ``k <= n + 2`` and ``us``-derivative
    order ``m <= m_max`` the maximal ratio of the measured quantity to its
    decay envelope is recorded. The background area radius is used as the
    decay prefactor ``r``. The report passes iff every ratio is below 1.
    """
    params = params if params is not None else SchwarzschildParams()
    spec = sample_spec if sample_spec is not None else SampleSpec()
    eps = profile.epsilon
    K, M = spec.n + 2, spec.m_max
    grid = SphereGrid(spec.nlat)
    from .sphere import MAX_DERIVATIVE_ORDER
    if K > MAX_DERIVATIVE_ORDER:
        from .errors import UnsupportedOrder
        raise UnsupportedOrder(f"k = {K} exceeds supported depth")
    bases = {kind: (_channel_basis(grid, profile, kind, K) if eps > 0 else {})
             for kind in ("omega", "b", "g")}
    names = {"omega": "|nabla^{k} d_us^{m} (log Omega - log Omega_S)| < eps r0 / (r r0^m)",
             "b": "|nabla^{k} d_us^{m} b| < eps r0^(1-m) |us|^[m=0] / r^3",
             "g": "|nabla^{k} d_us^{m} (gslash - gslash_S)| < eps r^2 / r0^m"}
    ratios = {"r / r_S in (1 - eps, 1 + eps)": 0.0}
    for kind in names:
        for k in range(K + 1):
            for m in range(M + 1):
                ratios[names[kind].format(k=k, m=m)] = 0.0
    rank = {"omega": 0, "b": 1, "g": 2}
    for us in spec.us_values:
        for s in spec.s_values:
            if not params.in_domain(us, s):
                continue
            u, sigma = us / params.r0, s / params.r0
            rho, _ = _rho(np.asarray(u), np.asarray(sigma))
            rho = float(rho)
            rj = _rho_jet(np.asarray(rho), M)
            q = _inv_jet(rj)
            uarr = np.full(grid.shape, u)
            if bases["g"]:
                chi0 = _u_jets(bases["g"], uarr, 0, 0)[0][0]
                Pm = np.eye(3)[:, :, None, None] - grid.x_hat[:, None] * grid.x_hat[None, :]
                Mg = Pm + eps * chi0 + grid.x_hat[:, None] * grid.x_hat[None, :]
                det = np.linalg.det(np.moveaxis(Mg, (0, 1), (-2, -1)))
                if np.any(det <= 0):
                    ratios["r / r_S in (1 - eps, 1 + eps)"] = np.inf
                else:
                    ratio_r = np.sqrt(grid.mean(np.sqrt(det)))
                    key = "r / r_S in (1 - eps, 1 + eps)"
                    ratios[key] = max(ratios[key], abs(ratio_r - 1.0) / eps)
            for kind, name in names.items():
                if not bases[kind]:
                    continue
                chi = _u_jets(bases[kind], uarr, M, K)
                for k in range(K + 1):
                    col = [chi[m][k] for m in range(M + 1)]
                    if kind == "omega":
                        jet = _lmul(q, col)
                        env = [rho ** -1] * (M + 1)
                    elif kind == "b":
                        uj = [np.asarray(u), np.asarray(1.0), np.asarray(0.0)][: M + 1]
                        c = _lmul(uj, _lmul(q, _lmul(q, q)))
                        jet = _lmul(c, col)
                        env = [abs(u) * rho ** -3] + [rho ** -3] * M
                    else:
                        jet = _lmul(_lmul(rj, rj), col)
                        env = [rho ** 2] * (M + 1)
                    for m in range(M + 1):
                        meas = _tnorm(jet[m], rank[kind] + k)
                        key = name.format(k=k, m=m)
                        ratios[key] = max(ratios[key], _ratio(meas, np.full(meas.shape, env[m])))
    return ValidationReport(ratios, eps)
