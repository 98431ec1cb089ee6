"""Model kernels: radial adhesion profile, binding kernels, adhesion potential.

The potential is H(x) = -int_0^{|x|} 1_[0,1](s) F(s) ds, so

    grad H(x) = -F(|x|) x/|x|    for 0 < |x| < 1,   0 at x=0 and |x| >= 1,

and Delta H is a finite measure with three parts: an absolutely continuous
density -(F'(r) + (d-1) F(r)/r) on the open unit ball, a surface part with
weight F(1) on the unit sphere (d >= 2), and for d = 1 atoms -2 F(0) delta_0
and F(1) (delta_1 + delta_{-1}).  The convolutions grad-H * u and
Delta-H * u are realised as compact cell-averaged stencils applied by direct
summation (no FFT wraparound near the truncated domain boundary).

Binding kernels: phi^{+/-}(s) = (1 - s^{b})^{+/- a} (phi^+ extended by zero
past s = 1) and G^{+/-}(x, y) = phi^{+/-}(|x - y|) K^{+/-}(t, (x+y)/2).
phi^- blows up as s -> 1^-, so evaluation is capped at the configured domain
diameter s_cap = 2 rho < 1.
"""

import numpy as np

from ._core import convolve_stencil
from .errors import DomainError
from .measures import GridField, VectorField

_CAP_SLACK = 1e-12  # s == s_cap is admitted; reject only strictly beyond

_N_PROFILE_SAMPLE = 2049
_N_TV_SAMPLE = 8192
_Q_SUBSAMPLE = 8
_Q_ORIGIN = 16
_N_RAY = 64


def _vectorize_if_needed(fn):
    try:
        with np.errstate(all="ignore"):
            out = fn(np.array([0.0, 0.5]))
        if np.shape(out) == (2,):
            return fn
    except Exception:
        pass
    return np.vectorize(fn, otypes=[float])


class RadialProfile:
    """Adhesion strength F(s) vs distance, with derivative, on [0, 1].

    f_max = sup |F| on [0,1] (computed from a dense sample when not given),
    f1 = F(1).
    """

    def __init__(self, F, dF, f_max=None, f1=None, kind="custom"):
        self.F = _vectorize_if_needed(F)
        self.dF = _vectorize_if_needed(dF)
        self.kind = kind
        s = np.linspace(0.0, 1.0, _N_PROFILE_SAMPLE)
        with np.errstate(all="ignore"):
            fs, dfs = self.F(s), self.dF(s)
        if not (np.all(np.isfinite(fs)) and np.all(np.isfinite(dfs))):
            raise ValueError("profile F or dF is not finite on [0, 1]")
        self.f_max = float(np.abs(fs).max()) if f_max is None else float(f_max)
        self.f1 = float(self.F(np.array([1.0]))[0]) if f1 is None else float(f1)

    @property
    def f0(self):
        return float(self.F(np.array([0.0]))[0])

    @classmethod
    def constant(cls, value=1.0):
        return cls(lambda s: np.full_like(s, value, dtype=float),
                   lambda s: np.zeros_like(s, dtype=float),
                   f_max=abs(value), f1=value, kind="constant")

    @classmethod
    def linear_decay(cls, value=1.0):
        return cls(lambda s: value * (1.0 - s), lambda s: np.full_like(s, -value, dtype=float),
                   f_max=abs(value), f1=0.0, kind="linear_decay")

    @classmethod
    def quadratic_decay(cls, value=1.0):
        return cls(lambda s: value * (1.0 - s**2), lambda s: -2.0 * value * s,
                   f_max=abs(value), f1=0.0, kind="quadratic_decay")


# --- binding/unbinding modulations K(t, x), strictly positive ---------------

def constant_modulation(value):
    if value <= 0:
        raise ValueError("K must be strictly positive")

    def K(t, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(value))

    K.kind, K.params = "constant", {"value": float(value)}
    return K


def gaussian_x_modulation(value, sigma):
    if value <= 0 or sigma <= 0:
        raise ValueError("K must be strictly positive")

    def K(t, x):
        x = np.asarray(x, dtype=float)
        return value * np.exp(-(x**2).sum(axis=-1) / (2.0 * sigma**2))

    K.kind, K.params = "gaussian_x", {"value": float(value), "sigma": float(sigma)}
    return K


def affine_t_modulation(value, slope):
    if value <= 0:
        raise ValueError("K must be strictly positive at t=0")

    def K(t, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(value) + float(slope) * float(t))

    K.kind, K.params = "affine_t", {"value": float(value), "slope": float(slope)}
    return K


MODULATIONS = {
    "constant": constant_modulation,
    "gaussian_x": gaussian_x_modulation,
    "affine_t": affine_t_modulation,
}


class InteractionKernel:
    """Binding (+) / unbinding (-) kernels G^{+/-}(x,y) = phi(|x-y|) K(t, mid).

    a_plus, a_minus > 0; b_plus, b_minus >= 2; K strictly positive callables
    of (t, midpoint).  s_cap = 2 rho caps all pairwise distances.
    """

    def __init__(self, a_plus, a_minus, b_plus, b_minus, K_plus, K_minus,
                 s_cap, d):
        if a_plus <= 0 or a_minus <= 0:
            raise ValueError("exponents a must be positive")
        if b_plus < 2 or b_minus < 2:
            raise ValueError("exponents b must be >= 2")
        if not 0 < s_cap < 1:
            raise ValueError("s_cap must lie in (0, 1)")
        self.a_plus, self.a_minus = float(a_plus), float(a_minus)
        self.b_plus, self.b_minus = float(b_plus), float(b_minus)
        self.K_plus, self.K_minus = K_plus, K_minus
        self.s_cap = float(s_cap)
        self.d = int(d)

    def _phi_array(self, sign, s):
        s = np.asarray(s, dtype=float)
        if sign == "+":
            base = np.clip(1.0 - s**self.b_plus, 0.0, None)
            return np.where(s < 1.0, base**self.a_plus, 0.0)
        return (1.0 - s**self.b_minus) ** (-self.a_minus)

    def phi(self, sign, s):
        """Scalar phi^{sign}(s); DomainError past the cap for the - sign."""
        s = float(s)
        if s < 0:
            raise DomainError("phi expects a nonnegative distance")
        if sign == "-":
            if s > self.s_cap * (1 + _CAP_SLACK):
                raise DomainError(
                    f"phi- evaluated at s={s} beyond the domain cap s_cap={self.s_cap}"
                )
            return float(self._phi_array("-", min(s, self.s_cap)))
        if sign != "+":
            raise ValueError("sign must be '+' or '-'")
        return float(self._phi_array("+", s))

    def G_cross(self, sign, t, xs, ys):
        """Rectangular matrix G^{sign}(x_i, y_j) at time t."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        diff = xs[:, None, :] - ys[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        dmax = dist.max() if dist.size else 0.0
        if dmax > self.s_cap * (1 + _CAP_SLACK):
            raise DomainError(
                f"node separation {dmax} exceeds the domain cap s_cap={self.s_cap}"
            )
        K = self.K_plus if sign == "+" else self.K_minus
        mid = 0.5 * (xs[:, None, :] + ys[None, :, :])
        G = self._phi_array(sign, np.minimum(dist, self.s_cap)) * K(t, mid)
        if G.size and G.min() <= 0.0:
            raise DomainError("G matrix has a nonpositive entry; K must be > 0")
        return G

    def G_matrix(self, sign, t, nodes):
        """Dense matrix G^{sign}(x_i, x_j) at time t over the given nodes."""
        return self.G_cross(sign, t, nodes, nodes)

    def kernel_bounds(self, t_range, rho, n_per_axis=None, n_t=5):
        """(c_upper, c_lower): sampled envelope of G^{+/-} over B_rho^2 x t_range.

        c_upper also dominates first and second finite-difference derivatives
        along each coordinate; c_lower is the sampled minimum of G itself.
        """
        if rho >= 0.5:
            raise DomainError("kernel bounds require rho < 1/2")
        d = self.d
        if n_per_axis is None:
            n_per_axis = {1: 33, 2: 11, 3: 5}.get(d, 5)
        t0, t1 = float(t_range[0]), float(t_range[-1])
        ts = np.linspace(t0, t1, n_t) if t1 > t0 else np.array([t0])

        # extrema on a lattice over the ball (endpoints included so that the
        # extreme separation 2 rho along each axis is attained)
        ax = np.linspace(-rho, rho, n_per_axis)
        mesh = np.meshgrid(*([ax] * d), indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
        pts = pts[np.sqrt((pts**2).sum(axis=1)) <= rho * (1 + 1e-12)]

        # derivatives on a cube lattice inscribed in the ball
        cax = np.linspace(-rho / np.sqrt(d), rho / np.sqrt(d), n_per_axis)
        cmesh = np.meshgrid(*([cax] * d), indexing="ij")
        cpts = np.stack([m.reshape(-1) for m in cmesh], axis=1)
        dx = cax[1] - cax[0]

        c_upper, c_lower = 0.0, np.inf
        for sign in ("+", "-"):
            for t in ts:
                G = self.G_matrix(sign, t, pts)
                c_lower = min(c_lower, float(G.min()))
                c_upper = max(c_upper, float(np.abs(G).max()))
                Gc = self.G_matrix(sign, t, cpts).reshape((n_per_axis,) * (2 * d))
                for axis in range(2 * d):
                    d1 = np.gradient(Gc, dx, axis=axis)
                    d2 = np.gradient(d1, dx, axis=axis)
                    c_upper = max(c_upper, float(np.abs(d1).max()),
                                  float(np.abs(d2).max()))
        if c_lower <= 0.0:
            raise DomainError("sampled G has a nonpositive value; K must be > 0")
        return c_upper, c_lower


def _sphere_area(d):
    return {2: 2.0 * np.pi, 3: 4.0 * np.pi}[d]


def _sphere_panels(d, min_panels):
    """Midpoint latitude-longitude tessellation of the unit sphere in R^d:
    returns (points (n,d), panel measures (n,)) with n >= min_panels."""
    if d == 2:
        n = max(int(min_panels), 128)
        th = (np.arange(n) + 0.5) * (2.0 * np.pi / n)
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n, 2.0 * np.pi / n)
    if d == 3:
        n_lon = int(np.ceil(np.sqrt(2.0 * max(min_panels, 192))))
        n_lat = int(np.ceil(max(min_panels, 192) / n_lon))
        ph = (np.arange(n_lat) + 0.5) * (np.pi / n_lat)
        th = (np.arange(n_lon) + 0.5) * (2.0 * np.pi / n_lon)
        P, T = np.meshgrid(ph, th, indexing="ij")
        pts = np.stack([np.sin(P) * np.cos(T), np.sin(P) * np.sin(T), np.cos(P)],
                       axis=-1).reshape(-1, 3)
        sig = ((np.pi / n_lat) * (2.0 * np.pi / n_lon) * np.sin(P)).reshape(-1)
        return pts, sig
    raise DomainError(f"surface quadrature not implemented for d={d}")


def _subsample_average(fn, centers, h, q):
    """Mean of fn over a q^d midpoint sublattice of each cell."""
    d = centers.shape[1]
    off1 = (np.arange(q) + 0.5) / q * h - h / 2.0
    mesh = np.meshgrid(*([off1] * d), indexing="ij")
    offs = np.stack([m.reshape(-1) for m in mesh], axis=1)
    pts = (centers[:, None, :] + offs[None, :, :]).reshape(-1, d)
    return fn(pts).reshape(len(centers), -1).mean(axis=1)


class AdhesionPotential:
    """The potential H for a radial profile: gradient, Laplacian measure, and
    their discrete convolution operators on grid fields."""

    def __init__(self, profile, d, min_surface_panels=None):
        self.profile = profile
        self.d = int(d)
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        self.min_surface_panels = (64 * self.d if min_surface_panels is None
                                   else int(min_surface_panels))
        self._grad_cache = {}
        self._lap_cache = {}

    # pointwise evaluations -------------------------------------------------

    def grad_H(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.sqrt((x**2).sum(axis=1))
        out = np.zeros_like(x)
        live = (r > 0) & (r < 1)
        out[live] = -(self.profile.F(r[live]) / r[live])[:, None] * x[live]
        return out

    def lap_H_ac(self, x):
        """Density of the absolutely continuous part of Delta H (0 outside
        the open unit ball and at the origin)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.sqrt((x**2).sum(axis=1))
        out = np.zeros(len(x))
        live = (r > 0) & (r < 1)
        rl = r[live]
        val = -self.profile.dF(rl)
        if self.d >= 2:
            val = val - (self.d - 1) * self.profile.F(rl) / rl
        out[live] = val
        return out

    @property
    def lap_H_surface(self):
        """Weight carried by the unit sphere (d >= 2)."""
        return self.profile.f1

    @property
    def lap_H_atoms(self):
        """d=1 point weights. The origin atom is -2F(0): H' jumps from +F(0)
        to -F(0) across 0 (check F==1: H=-|x| near 0 and |x|'' = 2 delta_0)."""
        return {0.0: -2.0 * self.profile.f0,
                1.0: self.profile.f1, -1.0: self.profile.f1}

    def lap_tv_bound(self):
        """Closed-form total variation of Delta H (midpoint-sampled integrals)."""
        p = self.profile
        s = (np.arange(_N_TV_SAMPLE) + 0.5) / _N_TV_SAMPLE
        if self.d == 1:
            return 2.0 * float(np.abs(p.dF(s)).mean()) + 2.0 * p.f0 + 2.0 * abs(p.f1)
        integ = (np.abs(p.dF(s)) + (self.d - 1) * np.abs(p.F(s)) / s) * s ** (self.d - 1)
        return _sphere_area(self.d) * (float(integ.mean()) + abs(p.f1))

    def grad_sup_bound(self):
        return self.profile.f_max

    # stencils --------------------------------------------------------------

    def _offsets(self, h):
        R = int(np.floor(1.0 / h + 0.5)) + 1
        ax = np.arange(-R, R + 1)
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        offsets = np.stack([m.reshape(-1) for m in mesh], axis=1)
        a = np.abs(offsets) * h
        rmin = np.sqrt((np.maximum(a - h / 2.0, 0.0) ** 2).sum(axis=1))
        rmax = np.sqrt(((a + h / 2.0) ** 2).sum(axis=1))
        return R, offsets, rmin, rmax

    def grad_stencil(self, h):
        """Component stencils of grad-H * (.): array (d, (2R+1)^d), cell
        averages of each gradient component. Entries bounded by f_max."""
        key = round(float(h), 15)
        if key in self._grad_cache:
            return self._grad_cache[key]
        R, offsets, rmin, rmax = self._offsets(h)
        centers = offsets * h
        shape = (2 * R + 1,) * self.d
        origin = np.all(offsets == 0, axis=1)
        reach = rmin < 1.0
        subsample = reach & ~origin & ((rmax >= 1.0) | (rmin < 2.0 * h))
        smooth = reach & ~origin & ~subsample
        comps = np.zeros((self.d,) + shape)
        for c in range(self.d):
            def g(pts, c=c):
                r = np.sqrt((pts**2).sum(axis=1))
                out = np.zeros(len(pts))
                live = (r > 0) & (r < 1)
                out[live] = -self.profile.F(r[live]) * pts[live, c] / r[live]
                return out

            w = np.zeros(len(offsets))
            w[smooth] = g(centers[smooth])
            if subsample.any():
                w[subsample] = _subsample_average(g, centers[subsample], h, _Q_SUBSAMPLE)
            # cell containing the origin: exact 0 by antisymmetry
            comps[c] = w.reshape(shape)
        self._grad_cache[key] = (R, comps)
        return self._grad_cache[key]

    def _origin_cell_singular_integral(self, h):
        """int over the origin cell of (d-1) F(r)/r dx, via the polar form
        (d-1) int_angles int_0^{L(w)} F(r) r^{d-2} dr dw with L(w) the ray
        length to the cell boundary. The integrand is bounded, so midpoint
        quadrature behaves."""
        if self.d == 1:
            return 0.0
        pts, sig = _sphere_panels(self.d, max(2048, 4 * self.min_surface_panels))
        L = (h / 2.0) / np.abs(pts).max(axis=1)
        rq = (np.arange(_N_RAY) + 0.5) / _N_RAY
        r = L[:, None] * rq[None, :]
        vals = self.profile.F(r.reshape(-1)).reshape(r.shape) * r ** (self.d - 2)
        ray = (L / _N_RAY) * vals.sum(axis=1)
        return (self.d - 1) * float(sig @ ray)

    def lap_stencil(self, h):
        """Stencil of Delta-H * (.): cell averages of the ac density plus the
        surface and atom parts deposited as weight/h^d into their cells."""
        key = round(float(h), 15)
        if key in self._lap_cache:
            return self._lap_cache[key]
        R, offsets, rmin, rmax = self._offsets(h)
        centers = offsets * h
        shape = (2 * R + 1,) * self.d
        origin = np.all(offsets == 0, axis=1)
        reach = rmin < 1.0
        subsample = reach & ~origin & ((rmax >= 1.0) | (rmin < 2.0 * h))
        smooth = reach & ~origin & ~subsample

        def g(pts):
            r = np.sqrt((pts**2).sum(axis=1))
            out = np.zeros(len(pts))
            live = (r > 0) & (r < 1)
            rl = r[live]
            val = -self.profile.dF(rl)
            if self.d >= 2:
                val = val - (self.d - 1) * self.profile.F(rl) / rl
            out[live] = val
            return out

        w = np.zeros(len(offsets))
        w[smooth] = g(centers[smooth])
        if subsample.any():
            w[subsample] = _subsample_average(g, centers[subsample], h, _Q_ORIGIN)

        # origin cell: -dF part subsampled (bounded), F/r part in polar form
        def g_reg(pts):
            r = np.sqrt((pts**2).sum(axis=1))
            out = np.zeros(len(pts))
            live = r < 1
            out[live] = -self.profile.dF(r[live])
            return out

        w[origin] = _subsample_average(g_reg, centers[origin], h, _Q_ORIGIN)
        w[origin] -= self._origin_cell_singular_integral(h) / h**self.d

        w = w.reshape(shape)
        if self.d == 1:
            w[R] += -2.0 * self.profile.f0 / h
            k1 = int(round(1.0 / h))
            k1 = min(k1, 2 * R)
            w[R + k1] += self.profile.f1 / h
            w[R - k1] += self.profile.f1 / h
        else:
            # panels no coarser than the cells, else the deposited surface
            # part is lumpy at a scale above h
            need = int(np.ceil((4.0 * np.pi / h) ** (self.d - 1) / np.pi ** (self.d - 2)))
            pts, sig = _sphere_panels(self.d, max(self.min_surface_panels, need))
            idx = np.rint(pts / h).astype(int) + R
            np.clip(idx, 0, 2 * R, out=idx)
            np.add.at(w, tuple(idx.T), self.profile.f1 * sig / h**self.d)
        self._lap_cache[key] = (R, w)
        return self._lap_cache[key]

    def assembled_lap_tv(self, h):
        """Total variation of the assembled Delta-H stencil (mass units)."""
        _, w = self.lap_stencil(h)
        return float(np.abs(w).sum()) * h**self.d

    # convolution operators -------------------------------------------------

    def adhesion_velocity(self, u, out_box=None):
        """(grad-H * u)(x_i) = sum_j gradH_avg(x_i - x_j) u_j h^d."""
        _, comps = self.grad_stencil(u.grid.h)
        cv = u.grid.h**u.grid.d
        lo, hi = (None, None) if out_box is None else out_box
        fields = [convolve_stencil(u.values, np.ascontiguousarray(comps[c]), cv, lo, hi)
                  for c in range(self.d)]
        return VectorField(u.grid, np.stack(fields, axis=0))

    def adhesion_divergence(self, u, out_box=None):
        """(Delta-H * u)(x_i) via the three-part measure decomposition."""
        _, w = self.lap_stencil(u.grid.h)
        cv = u.grid.h**u.grid.d
        lo, hi = (None, None) if out_box is None else out_box
        vals = convolve_stencil(u.values, np.ascontiguousarray(w), cv, lo, hi)
        return GridField(u.grid, vals, validate=False)


class KernelSet:
    """Bundle of everything kernel-shaped a model run needs."""

    def __init__(self, d, rho, profile, interaction):
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.d = int(d)
        self.rho = float(rho)
        self.profile = profile
        self.interaction = interaction
        self.potential = AdhesionPotential(profile, d)
