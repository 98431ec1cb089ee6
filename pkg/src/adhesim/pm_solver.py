"""Explicit conservative finite-volume solver for the regularized
degenerate diffusion-advection equation

    d_t u = eps Lap(u) + Lap(u^2) - div(V u chi(u))

on a truncated box with Dirichlet-0 ghost cells. The diffusive face flux
(eps + uL + uR)(uR - uL)/h realizes Lap(u^2) = div(2u grad u) with the
arithmetic face average of 2u; advection is first-order upwind on the face
velocity (VL + VR)/2, which keeps the scheme monotone and hands the tests a
discrete comparison principle. Fluxes telescope, so interior mass is
conserved to rounding.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _core
from .analysis import SUPPORT_THRESHOLD, max_bound_D1
from .errors import (AdmissibilityError, BoundBreach, CFLViolation,
                     DegenerateState, NegativityBreach)
from .measures import GridField, VectorField

_MASS_DRIFT_TOL = 1e-8
_CLIP_BUDGET = 1e-12      # per step, relative to total mass
_D1_SLACK = 0.05
_N_CHI_SAMPLE = 2049
_N_MOLLIFY_Q = 129


class ChiFunction:
    """Adhesion sensitivity chi(u) with chi(0) = 0 and bounded derivative.

    Built-ins map onto the compiled kernel's enum; custom callables run on
    the numpy backend. sup_on/dsup_on report sup|chi| and sup|chi'| over
    [0, u_max], which is what the CFL bound and the D1 monitor consume.
    """

    def __init__(self, kind, c=1.0, fn=None, dfn=None):
        self.kind = kind
        self.c = float(c)
        self.fn = fn
        self.dfn = dfn
        if kind == "custom":
            if fn is None:
                raise ValueError("custom chi needs a callable")
            if abs(float(fn(np.array([0.0]))[0])) > 1e-12:
                raise ValueError("chi(0) must vanish")
            self.core_kind = _core.CHI_CUSTOM
        elif kind == "linear":
            self.core_kind = _core.CHI_LINEAR
        elif kind == "saturating":
            self.core_kind = _core.CHI_SATURATING
        elif kind == "exp_saturating":
            self.core_kind = _core.CHI_EXP_SATURATING
        else:
            raise ValueError(f"unknown chi kind {kind!r}")

    @classmethod
    def linear(cls, c):
        return cls("linear", c)

    @classmethod
    def saturating(cls, c):
        return cls("saturating", c)

    @classmethod
    def exp_saturating(cls, c):
        return cls("exp_saturating", c)

    @classmethod
    def custom(cls, fn, dfn=None, c=1.0):
        return cls("custom", c=c, fn=fn, dfn=dfn)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "linear":
            return self.c * u
        if self.kind == "saturating":
            return self.c * u / (1.0 + u)
        if self.kind == "exp_saturating":
            return -self.c * np.expm1(-u)
        return np.asarray(self.fn(u), dtype=float)

    def sup_on(self, u_max):
        u_max = max(float(u_max), 0.0)
        if self.kind == "linear":
            return self.c * u_max
        if self.kind == "saturating":
            return self.c * u_max / (1.0 + u_max)
        if self.kind == "exp_saturating":
            return self.c * -math.expm1(-u_max)
        s = np.linspace(0.0, max(u_max, 1e-30), _N_CHI_SAMPLE)
        return float(np.abs(self(s)).max())

    def dsup_on(self, u_max):
        if self.kind in ("linear", "saturating", "exp_saturating"):
            return self.c  # each built-in attains sup|chi'| = c at u = 0
        if self.dfn is not None:
            s = np.linspace(0.0, max(float(u_max), 1e-30), _N_CHI_SAMPLE)
            return float(np.abs(np.asarray(self.dfn(s), dtype=float)).max())
        s = np.linspace(0.0, max(float(u_max), 1e-30), _N_CHI_SAMPLE)
        return float(np.abs(np.gradient(self(s), s)).max())


@dataclass
class SolverConfig:
    h: float
    domain_radius: float
    chi: ChiFunction
    epsilon: float = 0.0
    cfl_safety: float = 0.4
    mollifier_eps: float = 0.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("grid spacing h must be positive")
        if self.domain_radius <= 0:
            raise ValueError("domain radius must be positive")
        if self.epsilon < 0:
            raise ValueError("viscosity epsilon must be nonnegative")
        if not (0 < self.cfl_safety < 1):
            raise ValueError("cfl_safety must lie in (0, 1)")
        if self.mollifier_eps < 0:
            raise ValueError("mollifier radius must be nonnegative")
        if not isinstance(self.chi, ChiFunction):
            raise TypeError("chi must be a ChiFunction")


@dataclass
class State:
    t: float
    u: GridField
    diagnostics: dict = field(default_factory=dict)


def _bump_weights(offsets):
    """Unnormalized mollifier samples exp(1/(s^2 - 1)) on |s| < 1."""
    s2 = np.clip(offsets**2, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        w = np.where(s2 < 1.0, np.exp(1.0 / (s2 - 1.0)), 0.0)
    return w


def mollify(f, eps, h=None):
    """Smooth f by the normalized compactly supported bump of radius eps.

    GridField input convolves on its own grid with weights renormalized to
    unit discrete mass, so the field's mass is preserved exactly. A scalar
    callable is convolved by midpoint quadrature and returned as a new
    callable. eps = 0 is the identity.
    """
    if eps == 0:
        return f
    if isinstance(f, GridField):
        grid = f.grid
        n = int(np.floor(eps / grid.h + 0.5))
        if n == 0:
            return f.copy()
        axes = [np.arange(-n, n + 1) * grid.h for _ in range(grid.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        r = np.sqrt(sum(a**2 for a in mesh))
        stencil = _bump_weights(r / eps)
        total = stencil.sum() * grid.h**grid.d
        if total <= 0:
            return f.copy()
        stencil /= total
        lo = np.zeros(grid.d, dtype=int)
        hi = np.array(f.values.shape, dtype=int)
        out = _core.convolve_stencil(f.values, stencil, grid.h**grid.d, lo, hi)
        return GridField(grid, out, validate=False)
    if callable(f):
        edges = np.linspace(-eps, eps, _N_MOLLIFY_Q + 1)
        y = 0.5 * (edges[:-1] + edges[1:])
        q = _bump_weights(y / eps)
        q /= q.sum()

        def smoothed(s):
            s = np.asarray(s, dtype=float)
            vals = np.asarray(f(s[..., None] - y), dtype=float)
            return vals @ q

        return smoothed
    raise TypeError("mollify expects a GridField or a callable")


def assemble_velocity(kernels, w, u):
    """Adhesion velocity V = w * (grad H * u); w is a scalar in [0, 1] or a
    GridField on u's grid."""
    if np.isscalar(w) and float(w) == 0.0:
        comps = np.zeros((u.grid.d,) + tuple(u.values.shape))
        return VectorField(u.grid, comps)
    vel = kernels.potential.adhesion_velocity(u)
    if np.isscalar(w):
        scale = float(w)
        return VectorField(u.grid, vel.components * scale)
    if not u.grid.same_geometry(w.grid):
        raise ValueError("w and u must live on the same grid")
    return VectorField(u.grid, vel.components * w.values[None, ...])


def divergence_sup(V):
    """Discrete sup |div V| by central differences (one-sided at the rim)."""
    total = np.zeros_like(V.components[0])
    for k in range(V.grid.d):
        total += np.gradient(V.components[k], V.grid.h, axis=k)
    return float(np.abs(total).max())


def cfl_dt(state, V, config, cap=None):
    """Stable explicit step size

        dt = cfl_safety * min( h^2 / (2 d (eps + 4 max u)),
                               h / (2 d max|V| (sup|chi| + max u sup|chi'|)) )

    When every term degenerates (eps = 0, u = 0, V = 0) the step is capped
    at `cap` (the output interval); without a cap that state raises."""
    h = config.h
    d = state.u.grid.d
    u_max = state.u.sup()
    v_max = 0.0 if V is None else V.sup()
    diff_scale = 2.0 * d * (config.epsilon + 4.0 * u_max)
    adv_scale = 2.0 * d * v_max * (config.chi.sup_on(u_max)
                                   + u_max * config.chi.dsup_on(u_max))
    if diff_scale == 0.0 and adv_scale == 0.0:
        if cap is None:
            raise DegenerateState(
                "no CFL restriction: zero field, zero drift, zero viscosity")
        return float(cap)
    dt = math.inf
    if diff_scale > 0:
        dt = min(dt, h * h / diff_scale)
    if adv_scale > 0:
        dt = min(dt, h / adv_scale)
    dt *= config.cfl_safety
    if cap is not None:
        dt = min(dt, float(cap))
    return dt


def step(state, V, dt, config):
    """One forward-Euler step; returns the new State.

    Raises CFLViolation when dt exceeds the stability bound for this state
    and NegativityBreach when clipping removes more than 1e-12 of the total
    mass (either signals a scheme or configuration bug, not a model event).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    allowed = cfl_dt(state, V, config, cap=math.inf)
    if dt > allowed * (1 + 1e-9):
        raise CFLViolation(f"dt {dt:.3e} exceeds the stable limit {allowed:.3e}")
    chi = config.chi
    vel = None if V is None else V.components
    new_vals, clipped = _core.fv_step(
        state.u.values, vel, dt, config.h, config.epsilon,
        chi.core_kind, chi.c, chi_fn=chi if chi.core_kind == _core.CHI_CUSTOM else None)
    mass_scale = max(state.u.mass(), 1e-300)
    if clipped > _CLIP_BUDGET * mass_scale:
        raise NegativityBreach(
            f"clipped {clipped:.3e} mass in one step (budget {_CLIP_BUDGET:.0e} relative)")
    u_new = GridField(state.u.grid, new_vals, validate=False)
    diag = {"mass": u_new.mass(), "max_u": u_new.sup(), "dt": dt,
            "clipped_mass": clipped}
    return State(state.t + dt, u_new, diag)


def _as_w_of_t(w_traj):
    if callable(w_traj) and not isinstance(w_traj, GridField):
        return w_traj
    return lambda t: w_traj


def _radius_array(grid):
    centers = grid.cell_centers().reshape(-1, grid.d)
    return np.sqrt((centers**2).sum(axis=1)).reshape(grid.shape)


def solve_fixed_w(u0, w_traj, T, config, kernels=None, output_times=None,
                  support_threshold=SUPPORT_THRESHOLD):
    """March u from u0 to time T with a prescribed binding trajectory.

    w_traj is a scalar, a GridField on u0's grid, or a callable t -> either;
    the velocity V = w (grad H * u) is reassembled from the current state
    every step. kernels may be omitted only when w is identically 0 (pure
    porous-medium run). Returns the list of States at t = 0, each requested
    output time, and T.

    Monitors enforced while the support stays inside the domain: relative
    mass drift <= 1e-8, and sup u <= 1.05 * D1 envelope (BoundBreach
    otherwise -- both indicate scheme bugs, not model behaviour).
    """
    if T < 0:
        raise ValueError("horizon T must be nonnegative")
    if config.mollifier_eps > 0:
        u0 = mollify(u0, config.mollifier_eps)
    grid = u0.grid
    if grid.half_width < config.domain_radius - 1e-12:
        raise AdmissibilityError(
            f"grid half-width {grid.half_width} does not cover the domain "
            f"radius {config.domain_radius}")
    w_of = _as_w_of_t(w_traj)
    r_arr = _radius_array(grid)

    def measure_support(values):
        mask = values > support_threshold
        return float(r_arr[mask].max()) if mask.any() else 0.0

    mass0 = u0.mass()
    u0_max = u0.sup()
    state = State(0.0, u0, {
        "mass": mass0, "max_u": u0_max,
        "support_radius": measure_support(u0.values),
        "dt_history": {"min": None, "max": None, "count": 0},
    })
    trajectory = [state]
    if T == 0:
        return trajectory

    boundaries = sorted({float(s) for s in (output_times or [])
                         if 0 < float(s) < T})
    boundaries.append(float(T))
    umax_running = u0_max
    divv_running = 0.0
    interior_limit = grid.half_width - 2 * config.h

    for t_stop in boundaries:
        dts = []
        clipped_total = 0.0
        while state.t < t_stop - 1e-14:
            w_now = w_of(state.t)
            pure_pm = np.isscalar(w_now) and float(w_now) == 0.0
            if pure_pm:
                V = None
            else:
                if kernels is None:
                    raise ValueError("kernels are required when w is nonzero")
                V = assemble_velocity(kernels, w_now, state.u)
                divv_running = max(divv_running, divergence_sup(V))
            dt = cfl_dt(state, V, config, cap=t_stop - state.t)
            state = step(state, V, dt, config)
            dts.append(dt)
            clipped_total += state.diagnostics["clipped_mass"]
            umax_running = max(umax_running, state.diagnostics["max_u"])

            support_r = measure_support(state.u.values)
            if support_r <= interior_limit:
                drift = abs(state.diagnostics["mass"] - mass0) / max(mass0, 1e-300)
                if drift > _MASS_DRIFT_TOL:
                    raise BoundBreach(
                        f"relative mass drift {drift:.3e} at t={state.t:.6f} "
                        f"with the support still interior")
            envelope = max_bound_D1(state.t, config.chi.sup_on(umax_running),
                                    divv_running, u0_max)
            if state.diagnostics["max_u"] > envelope * (1 + _D1_SLACK):
                raise BoundBreach(
                    f"sup u {state.diagnostics['max_u']:.6e} exceeds the D1 "
                    f"envelope {envelope:.6e} by more than 5% at t={state.t:.6f}")
        state.diagnostics["support_radius"] = measure_support(state.u.values)
        state.diagnostics["clipped_total"] = clipped_total
        state.diagnostics["dt_history"] = {
            "min": min(dts) if dts else None,
            "max": max(dts) if dts else None,
            "count": len(dts),
        }
        state.t = t_stop  # land exactly on the boundary (clip rounding)
        trajectory.append(state)
    return trajectory


def snapshot_to_csv(state, path):
    """One row per cell: coordinates then density, 17 significant digits."""
    grid = state.u.grid
    centers = grid.cell_centers().reshape(-1, grid.d)
    vals = state.u.values.reshape(-1)
    header = ",".join([f"x{k}" for k in range(grid.d)] + ["u"])
    with open(path, "w") as f:
        f.write(header + "\n")
        for row, v in zip(centers, vals):
            coords = ",".join(f"{c:.17g}" for c in row)
            f.write(f"{coords},{v:.17g}\n")


def diagnostics_to_json(trajectory, path=None):
    doc = [{"t": s.t,
            "mass": s.diagnostics.get("mass"),
            "max_u": s.diagnostics.get("max_u"),
            "support_radius": s.diagnostics.get("support_radius"),
            "dt_history": s.diagnostics.get("dt_history"),
            } for s in trajectory]
    if path is not None:
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
    return doc
