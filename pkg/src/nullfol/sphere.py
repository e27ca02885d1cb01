"""Spectral calculus on the round unit sphere.

Scalar fields are sampled on a Gauss-Legendre (colatitude) by equispaced
(longitude) grid and transformed to real orthonormal spherical harmonics

.. math::

    Y_{l0} = \\lambda_{l0}(\\theta), \\quad
    Y_{lm} = \\sqrt{2}\\,\\lambda_{lm}(\\theta)\\cos m\\phi, \\quad
    Y_{l,-m} = \\sqrt{2}\\,\\lambda_{lm}(\\theta)\\sin m\\phi,

with :math:`\\lambda_{lm}` the fully normalised associated Legendre
functions without the Condon-Shortley phase. Coefficients are stored in an
array of shape ``(..., 2, L + 1, L + 1)`` indexed ``[part, l, m]``; part 0
holds the cosine-type and part 1 the sine-type coefficients.

Tangent tensors are handled in the ambient frame of :math:`\\mathbb{R}^3`:
a rank-``r`` tangent tensor is an array of shape ``(3,) * r + (nlat, nlon)``
whose components are annihilated by contraction with the unit normal. The
covariant derivative of such a tensor is the projected ambient gradient of
its components, which keeps every operation a spectral transform of a
scalar field and makes the pointwise norm a plain sum of squares.
"""

from __future__ import annotations

import numpy as np

from .errors import GridMismatch, NotMeanZero, UnsupportedOrder

#: Deepest covariant derivative supported by :func:`covariant_derivatives`.
MAX_DERIVATIVE_ORDER = 4


def _legendre_columns(m, x, s, lmax, derivative=False):
    """Normalised Legendre functions ``lambda_{lm}`` for ``l = m..lmax``.

    Parameters
    ----------
    m : int
        Order.
    x, s : ndarray
        ``cos(theta)`` and ``sin(theta)`` at the evaluation points.
    lmax : int
        Largest degree.
    derivative : bool
        Also return ``d lambda / d theta``.

    Returns
    -------
    lam : ndarray, shape (lmax - m + 1,) + x.shape
    dlam : ndarray, optional
    """
    n = lmax - m + 1
    out = np.empty((n,) + np.shape(x))
    val = np.full(np.shape(x), 1.0 / np.sqrt(4.0 * np.pi))
    for k in range(1, m + 1):
        val = val * (np.sqrt((2.0 * k + 1.0) / (2.0 * k)) * s)
    out[0] = val
    if n > 1:
        out[1] = np.sqrt(2.0 * m + 3.0) * x * val
    for i in range(2, n):
        l = m + i
        a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
        b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
        out[i] = a * (x * out[i - 1] - b * out[i - 2])
    if not derivative:
        return out
    d = np.empty_like(out)
    for i in range(n):
        l = m + i
        d[i] = l * x * out[i]
        if i > 0:
            d[i] -= np.sqrt((2.0 * l + 1.0) / (2.0 * l - 1.0) * (l * l - m * m)) * out[i - 1]
    d /= s
    return out, d


class SphereGrid:
    """Gauss-Legendre by equispaced grid with its spectral transforms.

    Parameters
    ----------
    nlat : int
        Number of Gauss-Legendre colatitudes.
    nlon : int, optional
        Number of equispaced longitudes, at least ``2 * nlat``.
    lmax : int, optional
        Dealiasing band for evolved states, at most ``floor(2 nlat / 3)``.
        Defaults to ``2 * nlat // 3 - 1``.

    Attributes
    ----------
    band : int
        Largest degree resolved by the analysis transform.
    theta, phi : ndarray
        One-dimensional node coordinates; ``theta`` increases from north.
    x_hat, e_theta, e_phi : ndarray, shape (3, nlat, nlon)
        Unit normal and orthonormal coordinate frame in ambient components.
    """

    def __init__(self, nlat: int = 48, nlon: int | None = None, lmax: int | None = None):
        nlat = int(nlat)
        nlon = 2 * nlat if nlon is None else int(nlon)
        if nlat < 4:
            raise ValueError("nlat must be at least 4")
        if nlon < 2 * nlat:
            raise ValueError(f"nlon={nlon} must be at least 2*nlat={2 * nlat}")
        if lmax is None:
            lmax = 2 * nlat // 3 - 1
        lmax = int(lmax)
        if not 0 <= lmax <= (2 * nlat) // 3:
            raise ValueError(f"lmax={lmax} must lie in [0, {(2 * nlat) // 3}]")
        self.nlat, self.nlon, self.lmax = nlat, nlon, lmax
        self.band = min(nlat - 1, (nlon - 1) // 2)

        x, w = np.polynomial.legendre.leggauss(nlat)
        x, w = x[::-1], w[::-1]
        self.cos_theta = x
        self.sin_theta = np.sqrt((1.0 - x) * (1.0 + x))
        self.theta = np.arccos(x)
        self.gauss_weights = w
        self.phi = 2.0 * np.pi * np.arange(nlon) / nlon
        self.area_weights = np.outer(w, np.full(nlon, 2.0 * np.pi / nlon))

        th, ph = np.meshgrid(self.theta, self.phi, indexing="ij")
        st, ct = np.sin(th), np.cos(th)
        sp, cp = np.sin(ph), np.cos(ph)
        self.x_hat = np.stack([st * cp, st * sp, ct])
        self.e_theta = np.stack([ct * cp, ct * sp, -st])
        self.e_phi = np.stack([-sp, cp, np.zeros_like(sp)])
        self.cot = (x / self.sin_theta)[:, None]
        self.inv_sin = (1.0 / self.sin_theta)[:, None]

        L = self.band
        lam = np.zeros((L + 1, nlat, L + 1))
        dlam = np.zeros_like(lam)
        for m in range(L + 1):
            v, d = _legendre_columns(m, x, self.sin_theta, L, derivative=True)
            lam[m, :, m:] = v.T
            dlam[m, :, m:] = d.T
        ms = np.arange(L + 1)
        syn_scale = np.where(ms == 0, 1.0, np.sqrt(2.0))[:, None, None]
        ana_scale = np.where(ms == 0, 2.0 * np.pi, np.sqrt(2.0) * np.pi)[:, None, None]
        self._ana = lam * w[None, :, None] * ana_scale
        self._syn = np.ascontiguousarray(np.swapaxes(lam * syn_scale, 1, 2))
        self._syn_dtheta = np.ascontiguousarray(np.swapaxes(dlam * syn_scale, 1, 2))
        self._syn_sin = self._syn / self.sin_theta[None, None, :]
        ls = np.arange(L + 1)
        self.degrees = np.broadcast_to(ls[:, None], (L + 1, L + 1))
        self.orders = np.broadcast_to(ms[None, :], (L + 1, L + 1))
        valid = ls[:, None] >= ms[None, :]
        self.valid_mask = np.stack([valid, valid & (ms[None, :] > 0)])

    # ------------------------------------------------------------------
    def __eq__(self, other):
        return isinstance(other, SphereGrid) and (self.nlat, self.nlon, self.lmax) == (
            other.nlat, other.nlon, other.lmax)

    def __hash__(self):
        return hash((self.nlat, self.nlon, self.lmax))

    def __repr__(self):
        return f"SphereGrid(nlat={self.nlat}, nlon={self.nlon}, lmax={self.lmax})"

    @property
    def shape(self):
        return (self.nlat, self.nlon)

    @property
    def coeff_shape(self):
        return (2, self.band + 1, self.band + 1)

    # ------------------------------------------------------------------
    def analysis(self, values: np.ndarray) -> np.ndarray:
        """Grid values ``(..., nlat, nlon)`` to coefficients ``(..., 2, L+1, L+1)``."""
        values = np.asarray(values, dtype=float)
        lead = values.shape[:-2]
        L = self.band
        X = np.fft.rfft(values, axis=-1)[..., : L + 1]
        a = X.real * (2.0 / self.nlon)
        a[..., 0] *= 0.5
        b = X.imag * (-2.0 / self.nlon)
        ab = np.stack([a, b], axis=-3).reshape(-1, self.nlat, L + 1)
        c = np.matmul(np.moveaxis(ab, -1, 0), self._ana)  # (m, B, l)
        return np.moveaxis(c, 0, -1).reshape(lead + (2, L + 1, L + 1))

    def _synth(self, coeffs, table):
        coeffs = np.asarray(coeffs, dtype=float)
        lead = coeffs.shape[:-3]
        Lc = coeffs.shape[-1] - 1
        L = self.band
        if Lc > L:
            coeffs = coeffs[..., : L + 1, : L + 1]
            Lc = L
        c = coeffs.reshape((-1, Lc + 1, Lc + 1))
        v = np.matmul(np.moveaxis(c, -1, 0), table[: Lc + 1, : Lc + 1])  # (m, B, nlat)
        v = np.moveaxis(v, 0, -1).reshape(lead + (2, self.nlat, Lc + 1))
        X = np.zeros(lead + (self.nlat, self.nlon // 2 + 1), dtype=complex)
        X[..., : Lc + 1] = (0.5 * self.nlon) * (v[..., 0, :, :] - 1j * v[..., 1, :, :])
        X[..., 0] = self.nlon * v[..., 0, :, 0]
        return np.fft.irfft(X, n=self.nlon, axis=-1)

    def synthesis(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients to grid values."""
        return self._synth(coeffs, self._syn)

    @staticmethod
    def _dphi_coeffs(coeffs):
        L = coeffs.shape[-1] - 1
        m = np.arange(L + 1, dtype=float)
        out = np.empty_like(coeffs)
        out[..., 0, :, :] = m * coeffs[..., 1, :, :]
        out[..., 1, :, :] = -m * coeffs[..., 0, :, :]
        return out

    def synthesis_grad(self, coeffs: np.ndarray):
        """Orthonormal-frame gradient components ``(d_theta f, d_phi f / sin)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        dth = self._synth(coeffs, self._syn_dtheta)
        dph = self._synth(self._dphi_coeffs(coeffs), self._syn_sin)
        return dth, dph

    def synthesis_laplacian(self, coeffs: np.ndarray) -> np.ndarray:
        L = coeffs.shape[-1] - 1
        l = np.arange(L + 1, dtype=float)[:, None]
        return self.synthesis(-l * (l + 1.0) * coeffs)

    def truncate(self, coeffs: np.ndarray, lmax: int | None = None) -> np.ndarray:
        """Zero all coefficients of degree above ``lmax`` (default: the grid band)."""
        lmax = self.lmax if lmax is None else lmax
        out = np.array(coeffs, dtype=float, copy=True)
        out[..., lmax + 1:, :] = 0.0
        return out

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature of grid values over the unit sphere."""
        return np.tensordot(values, self.area_weights, axes=([-2, -1], [0, 1]))

    def mean(self, values: np.ndarray) -> np.ndarray:
        return self.integrate(values) / (4.0 * np.pi)

    # ------------------------------------------------------------------
    def to_ambient(self, comps: np.ndarray) -> np.ndarray:
        """Orthonormal-frame vector components ``(2, ...)`` to ambient ``(3, ...)``."""
        return self.e_theta * comps[0] + self.e_phi * comps[1]

    def from_ambient(self, amb: np.ndarray) -> np.ndarray:
        """Ambient vector ``(3, ...)`` to orthonormal-frame components ``(2, ...)``."""
        return np.stack([np.sum(self.e_theta * amb, axis=0), np.sum(self.e_phi * amb, axis=0)])

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Ambient gradient ``(3,) + values.shape`` of grid values."""
        dth, dph = self.synthesis_grad(self.analysis(values))
        return self._frame_combine(dth, dph)

    def _frame_combine(self, dth, dph):
        extra = dth.ndim - 2
        shape = (3,) + (1,) * extra + self.shape
        return self.e_theta.reshape(shape) * dth[None] + self.e_phi.reshape(shape) * dph[None]

    def project(self, T: np.ndarray, slot: int) -> np.ndarray:
        """Apply the tangential projector to one ambient index of ``T``."""
        Tm = np.moveaxis(T, slot, 0)
        extra = Tm.ndim - 3
        xh = self.x_hat.reshape((3,) + (1,) * extra + self.shape)
        Tm = Tm - xh * np.sum(xh * Tm, axis=0)[None]
        return np.moveaxis(Tm, 0, slot)

    def covariant_derivative(self, T: np.ndarray) -> np.ndarray:
        """Covariant derivative of an ambient tangent tensor.

        The new index is placed first: ``(nabla T)[k, a, b, ...]`` stands for
        the derivative along ``k`` of the ``(a, b, ...)`` component.
        """
        T = np.asarray(T, dtype=float)
        rank = T.ndim - 2
        D = self.gradient(T)
        for slot in range(1, rank + 1):
            D = self.project(D, slot)
        return D

    def synthesize_at(self, coeffs: np.ndarray, theta, phi) -> np.ndarray:
        """Evaluate a coefficient array at arbitrary points.

        Parameters
        ----------
        coeffs : ndarray, shape (..., 2, L+1, L+1)
        theta, phi : array_like, shape (npts,)

        Returns
        -------
        ndarray, shape (..., npts)
        """
        coeffs = np.asarray(coeffs, dtype=float)
        theta = np.asarray(theta, dtype=float).ravel()
        phi = np.asarray(phi, dtype=float).ravel()
        lead = coeffs.shape[:-3]
        L = coeffs.shape[-1] - 1
        c = coeffs.reshape((-1, 2, L + 1, L + 1))
        x, s = np.cos(theta), np.sin(theta)
        out = np.zeros((c.shape[0], theta.size))
        for m in range(L + 1):
            lam = _legendre_columns(m, x, s, L)  # (L-m+1, npts)
            cc = c[:, 0, m:, m]
            if m == 0:
                out += cc @ lam
            else:
                sc = c[:, 1, m:, m]
                out += np.sqrt(2.0) * ((cc @ lam) * np.cos(m * phi) + (sc @ lam) * np.sin(m * phi))
        return out.reshape(lead + (theta.size,))


# ----------------------------------------------------------------------
# Field containers
# ----------------------------------------------------------------------


def _check_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatch(f"{a.grid!r} != {b.grid!r}")


class ScalarField:
    """Real scalar field sampled on a :class:`SphereGrid`.

    Parameters
    ----------
    grid : SphereGrid
    values : ndarray, shape (nlat, nlon)
    """

    __array_priority__ = 1000

    def __init__(self, grid: SphereGrid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ValueError(f"values of shape {values.shape} do not match grid {grid.shape}")
        self.grid = grid
        self.values = values
        self._coeffs = None

    @classmethod
    def from_coeffs(cls, grid: SphereGrid, coeffs) -> "ScalarField":
        coeffs = np.array(coeffs, dtype=float)
        f = cls(grid, grid.synthesis(coeffs))
        f._coeffs = coeffs
        return f

    @classmethod
    def from_function(cls, grid: SphereGrid, fn) -> "ScalarField":
        th, ph = np.meshgrid(grid.theta, grid.phi, indexing="ij")
        return cls(grid, np.broadcast_to(fn(th, ph), grid.shape).astype(float))

    @classmethod
    def constant(cls, grid: SphereGrid, value: float) -> "ScalarField":
        f = cls(grid, np.full(grid.shape, float(value)))
        # exact l = 0 coefficient, so that the gradient is exactly zero
        f._coeffs = np.zeros(grid.coeff_shape)
        f._coeffs[0, 0, 0] = float(value) * np.sqrt(4.0 * np.pi)
        return f

    @classmethod
    def harmonic(cls, grid: SphereGrid, l: int, m: int, amplitude: float = 1.0) -> "ScalarField":
        """Real orthonormal harmonic ``Y_{l,m}``; negative ``m`` selects the sine type."""
        if not (0 <= l <= grid.band and abs(m) <= l):
            raise ValueError(f"invalid harmonic ({l}, {m}) for band {grid.band}")
        c = np.zeros(grid.coeff_shape)
        c[1 if m < 0 else 0, l, abs(m)] = amplitude
        return cls.from_coeffs(grid, c)

    @property
    def coeffs(self) -> np.ndarray:
        if self._coeffs is None:
            self._coeffs = self.grid.analysis(self.values)
        return self._coeffs

    def truncated(self, lmax: int | None = None) -> "ScalarField":
        return ScalarField.from_coeffs(self.grid, self.grid.truncate(self.coeffs, lmax))

    def mean(self) -> float:
        return float(self.grid.mean(self.values))

    def integrate(self) -> float:
        return float(self.grid.integrate(self.values))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def at(self, theta, phi) -> np.ndarray:
        """Spectral evaluation at arbitrary points."""
        return self.grid.synthesize_at(self.coeffs, theta, phi)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def _binop(self, other, op):
        if isinstance(other, ScalarField):
            _check_grid(self, other)
            return ScalarField(self.grid, op(self.values, other.values))
        return ScalarField(self.grid, op(self.values, other))

    def _linear(self, other, sign):
        """``self + sign * other`` carrying known coefficients along exactly."""
        if isinstance(other, ScalarField):
            _check_grid(self, other)
            out = ScalarField(self.grid, self.values + sign * other.values)
            if self._coeffs is not None and other._coeffs is not None:
                out._coeffs = self._coeffs + sign * other._coeffs
            return out
        if np.ndim(other) != 0:
            return self._binop(other, np.add if sign > 0 else np.subtract)
        out = ScalarField(self.grid, self.values + sign * float(other))
        if self._coeffs is not None:
            out._coeffs = self._coeffs.copy()
            out._coeffs[0, 0, 0] += sign * float(other) * np.sqrt(4.0 * np.pi)
        return out

    def __add__(self, other):
        return self._linear(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._linear(other, -1.0)

    def __rsub__(self, other):
        return -self._linear(other, -1.0)

    def __mul__(self, other):
        return self._binop(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binop(other, np.divide)

    def __neg__(self):
        out = ScalarField(self.grid, -self.values)
        if self._coeffs is not None:
            out._coeffs = -self._coeffs
        return out

    def __repr__(self):
        return f"ScalarField({self.grid!r}, mean={self.mean():.6g})"


class TangentField:
    """Tangent vector field stored as orthonormal-frame components.

    Parameters
    ----------
    grid : SphereGrid
    comps : ndarray, shape (2, nlat, nlon)
        Components along ``e_theta`` and ``e_phi``.
    """

    def __init__(self, grid: SphereGrid, comps):
        comps = np.asarray(comps, dtype=float)
        if comps.shape != (2,) + grid.shape:
            raise ValueError(f"components of shape {comps.shape} do not match grid")
        self.grid = grid
        self.comps = comps

    @classmethod
    def from_ambient(cls, grid: SphereGrid, amb) -> "TangentField":
        return cls(grid, grid.from_ambient(np.asarray(amb, dtype=float)))

    def ambient(self) -> np.ndarray:
        return self.grid.to_ambient(self.comps)

    def pointwise_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.comps ** 2, axis=0))

    def dot(self, other: "TangentField") -> ScalarField:
        _check_grid(self, other)
        return ScalarField(self.grid, np.sum(self.comps * other.comps, axis=0))

    def _binop(self, other, op):
        if isinstance(other, TangentField):
            _check_grid(self, other)
            return TangentField(self.grid, op(self.comps, other.comps))
        if isinstance(other, ScalarField):
            _check_grid(self, other)
            return TangentField(self.grid, op(self.comps, other.values[None]))
        return TangentField(self.grid, op(self.comps, other))

    def __add__(self, other):
        return self._binop(other, np.add)

    def __sub__(self, other):
        return self._binop(other, np.subtract)

    def __mul__(self, other):
        return self._binop(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return TangentField(self.grid, -self.comps)


class SymTensorField:
    """Symmetric 2-tensor stored as orthonormal-frame components ``(2, 2, nlat, nlon)``."""

    def __init__(self, grid: SphereGrid, comps):
        comps = np.asarray(comps, dtype=float)
        if comps.shape != (2, 2) + grid.shape:
            raise ValueError(f"components of shape {comps.shape} do not match grid")
        self.grid = grid
        self.comps = comps

    def ambient(self) -> np.ndarray:
        e = np.stack([self.grid.e_theta, self.grid.e_phi])  # (2, 3, ...)
        return np.einsum("iaxy,ijxy,jbxy->abxy", e, self.comps, e)

    def trace(self) -> ScalarField:
        return ScalarField(self.grid, self.comps[0, 0] + self.comps[1, 1])


# ----------------------------------------------------------------------
# Operators
# ----------------------------------------------------------------------


def grad(f: ScalarField) -> TangentField:
    """Gradient with respect to the round metric."""
    dth, dph = f.grid.synthesis_grad(f.coeffs)
    return TangentField(f.grid, np.stack([dth, dph]))


def laplacian(f: ScalarField) -> ScalarField:
    """Round Laplacian, diagonal with eigenvalue ``-l(l+1)``."""
    return ScalarField(f.grid, f.grid.synthesis_laplacian(f.coeffs))


def hessian(f: ScalarField) -> SymTensorField:
    """Round Hessian from spectral coordinate derivatives and Christoffel symbols."""
    g = f.grid
    c = f.coeffs
    m2 = -(g.orders.astype(float) ** 2) * c
    dphi = g._dphi_coeffs(c)
    f_th = g._synth(c, g._syn_dtheta)
    f_ph_s = g._synth(dphi, g._syn_sin)
    f_phph_s2 = g._synth(m2, g._syn_sin) * g.inv_sin
    f_thph_s = g._synth(dphi, g._syn_dtheta) * g.inv_sin
    lap = g.synthesis_laplacian(c)
    h_pp = f_phph_s2 + g.cot * f_th
    h_tp = f_thph_s - g.cot * f_ph_s
    h_tt = lap - h_pp
    return SymTensorField(g, np.array([[h_tt, h_tp], [h_tp, h_pp]]))


def divergence(v: TangentField) -> ScalarField:
    """Divergence of a tangent vector field."""
    g = v.grid
    D = g.gradient(v.ambient())  # D[k, a]
    return ScalarField(g, np.einsum("kkxy->xy", D))


def inv_laplacian(g_field: ScalarField, atol: float = 1e-10) -> ScalarField:
    """Mean-zero solution ``u`` of ``laplacian(u) = g``.

    Raises
    ------
    NotMeanZero
        If ``|mean(g)|`` exceeds ``atol * max(1, sup|g|)``.
    """
    mu = g_field.mean()
    if abs(mu) > atol * max(1.0, g_field.max_abs()):
        raise NotMeanZero(f"mean {mu:.3e} is not zero")
    grid = g_field.grid
    c = g_field.coeffs.copy()
    l = grid.degrees.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(l > 0, -c / (l * (l + 1.0)), 0.0)
    return ScalarField.from_coeffs(grid, c)


def mean(f: ScalarField) -> float:
    """Average over the unit sphere."""
    return f.mean()


def ambient_tensor(field) -> np.ndarray:
    """Ambient components of a scalar, vector or symmetric tensor field."""
    if isinstance(field, ScalarField):
        return field.values
    if isinstance(field, (TangentField, SymTensorField)):
        return field.ambient()
    return np.asarray(field, dtype=float)


def covariant_derivatives(field, order: int, grid: SphereGrid | None = None):
    """Ambient covariant derivatives ``[nabla^0 T, ..., nabla^order T]``.

    Raises
    ------
    UnsupportedOrder
        If ``order`` exceeds :data:`MAX_DERIVATIVE_ORDER`.
    """
    if order > MAX_DERIVATIVE_ORDER or order < 0:
        raise UnsupportedOrder(f"order {order} outside [0, {MAX_DERIVATIVE_ORDER}]")
    grid = grid if grid is not None else field.grid
    T = ambient_tensor(field)
    out = [T]
    for k in range(order):
        if k == 0 and isinstance(field, ScalarField):
            # start from the known coefficients rather than re-analysing the values
            T = grid._frame_combine(*grid.synthesis_grad(field.coeffs))
        else:
            T = grid.covariant_derivative(T)
        out.append(T)
    return out


def _lp_integral(grid, T, p):
    rank = T.ndim - 2
    sq = np.sum(T ** 2, axis=tuple(range(rank))) if rank else T ** 2
    return float(grid.integrate(sq ** (0.5 * p)))


def sobolev_norm(field, n: int, p: float = 2.0, grid: SphereGrid | None = None,
                 start: int = 0) -> float:
    """Sobolev norm ``(sum_{k=start}^{n} int |nabla^k T|^p)^(1/p)``.

    Parameters
    ----------
    field : ScalarField, TangentField, SymTensorField or ambient ndarray
    n : int
        Highest derivative order.
    p : float
        Integrability exponent, at least 1.
    grid : SphereGrid, optional
        Required when ``field`` is a bare array.
    start : int
        Lowest derivative order included. ``sobolev_norm(f, n + 1, p, start=1)``
        equals the norm of ``grad f`` in ``W^{n,p}``.

    Raises
    ------
    UnsupportedOrder
        If ``n`` exceeds :data:`MAX_DERIVATIVE_ORDER`.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    grid = grid if grid is not None else field.grid
    ders = covariant_derivatives(field, n, grid)
    total = sum(_lp_integral(grid, ders[k], p) for k in range(start, n + 1))
    return total ** (1.0 / p)


def gradient_norm(f: ScalarField, n: int, p: float = 2.0) -> float:
    """Norm of ``grad f`` in ``W^{n,p}``, that is derivative orders ``1..n+1`` of ``f``."""
    return sobolev_norm(f, n + 1, p, start=1)


def lp_norm(f: ScalarField, p: float = 2.0) -> float:
    return sobolev_norm(f, 0, p)


# ----------------------------------------------------------------------
# Rotations
# ----------------------------------------------------------------------


def rotation_field(grid: SphereGrid, axis: int) -> TangentField:
    """Killing field ``R_i = e_i x x`` generating rotations about axis ``i``.

    With this convention ``R_3`` is ``d/dphi`` and ``[R_1, R_2] = -R_3``.
    """
    if axis not in (1, 2, 3):
        raise ValueError("axis must be 1, 2 or 3")
    e = np.zeros(3)
    e[axis - 1] = 1.0
    amb = np.cross(e[:, None, None], grid.x_hat, axis=0)
    return TangentField.from_ambient(grid, amb)


def rotate_derivative(f: ScalarField, axis: int) -> ScalarField:
    """Derivative ``R_i f`` of a scalar along a rotation field."""
    R = rotation_field(f.grid, axis)
    return R.dot(grad(f))


def lie_derivative(R: TangentField, X):
    """Lie derivative along ``R`` of a scalar or a tangent vector field.

    For vector fields this is the bracket ``[R, X] = nabla_R X - nabla_X R``.
    """
    if isinstance(X, ScalarField):
        _check_grid(R, X)
        return R.dot(grad(X))
    _check_grid(R, X)
    g = R.grid
    Ra, Xa = R.ambient(), X.ambient()
    DX = g.covariant_derivative(Xa)
    DR = g.covariant_derivative(Ra)
    amb = np.einsum("kxy,kaxy->axy", Ra, DX) - np.einsum("kxy,kaxy->axy", Xa, DR)
    return TangentField.from_ambient(g, amb)
