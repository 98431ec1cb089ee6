"""Full-system drivers.

Production mode advances the density with a one-step-lagged binding field
(solve w from u^n, freeze it, take one PDE step). Validation mode runs the
global Picard iteration over whole trajectories; its outer contraction factor
is the empirical counterpart of the well-posedness argument. Both modes run
inside a certified ball around an anchor pair and halt with CertificateBreach
the moment a monitored radius is exceeded.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import analysis, binding, pm_solver
from .errors import AdmissibilityError, CertificateBreach, MassMismatch, NonConvergence
from .kernels import KernelSet
from .measures import GridField, field_to_measure, kr_distance

_MASS_EQ_TOL = 1e-9
_SUPPORT_THRESHOLD = pm_solver.SUPPORT_THRESHOLD
_MASS_DRIFT_TOL = 1e-8


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CoupledConfig:
    """Everything a coupled run needs beyond the initial field.

    mu0 is the anchor measure of the certificate; None anchors at u0 itself
    (KR admissibility then holds trivially). binding_every re-solves the
    binding equation every k-th PDE step; the induced lag error is logged in
    the manifest rather than hidden.
    """

    kernels: KernelSet
    solver: pm_solver.SolverConfig
    T: float
    m: float
    m_inf: float
    mu0: object = None
    binding_every: int = 1
    binding_tol: float = 1e-10
    output_times: tuple = ()
    picard_checkpoints: int = 8
    override_admissibility: bool = False
    headroom: float = 2.0

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("horizon T must be nonnegative")
        if self.m <= 0 or self.m_inf <= 0:
            raise ValueError("mass m and sup bound m_inf must be positive")
        if self.binding_every < 1:
            raise ValueError("binding_every must be a positive integer")
        if self.picard_checkpoints < 1:
            raise ValueError("picard_checkpoints must be a positive integer")
        if self.headroom < 1.0:
            raise ValueError("headroom must be >= 1")


@dataclass
class AdmissibilityReport:
    support_radius: float
    max_u: float
    mass: float
    kr_dist: float
    support_ok: bool
    bound_ok: bool
    mass_ok: bool
    kr_ok: bool

    @property
    def admissible(self):
        return self.support_ok and self.bound_ok and self.mass_ok and self.kr_ok

    def failed_checks(self):
        names = ("support", "sup bound", "mass", "kr")
        flags = (self.support_ok, self.bound_ok, self.mass_ok, self.kr_ok)
        return [n for n, ok in zip(names, flags) if not ok]

    def as_dict(self):
        return {
            "support_radius": self.support_radius, "max_u": self.max_u,
            "mass": self.mass, "kr_dist": self.kr_dist,
            "support_ok": self.support_ok, "bound_ok": self.bound_ok,
            "mass_ok": self.mass_ok, "kr_ok": self.kr_ok,
            "admissible": self.admissible,
        }


@dataclass
class Horizon:
    user_T: float
    t_support: float
    t_certificate: float
    T_effective: float

    def as_dict(self):
        return {"user_T": self.user_T, "t_support": self.t_support,
                "t_certificate": self.t_certificate,
                "T_effective": self.T_effective}


@dataclass
class CoupledSample:
    state: pm_solver.State
    w: binding.BindingField


@dataclass
class CoupledResult:
    samples: list
    horizon: Horizon
    certificate: binding.Certificate
    admissibility: AdmissibilityReport
    manifest: dict


@dataclass
class LipschitzReport:
    ratio: float
    exact_match: bool
    u_part: float
    w_part: float
    denominator: float
    runs: tuple = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# admissibility


def admissible_initial(u0, mu0, cert, rho, m, m_inf):
    """Check the four entry conditions for the certified well-posedness ball.

    Never raises: the report carries one boolean per condition plus the
    measured numbers, and .admissible for the overall verdict.
    """
    r_supp = analysis.support_radius(u0, threshold=_SUPPORT_THRESHOLD)
    max_u = u0.sup()
    mass = u0.mass()
    support_ok = r_supp <= rho / 4 + 1e-12
    bound_ok = max_u <= m_inf * (1 + 1e-12)
    mass_ok = abs(mass - m) <= _MASS_EQ_TOL * max(m, 1.0)
    try:
        kr = kr_distance(_field_measure(u0), mu0)
        kr_ok = kr <= cert.r2 / 2
    except MassMismatch:
        kr, kr_ok = float("nan"), False
    return AdmissibilityReport(r_supp, max_u, mass, kr, support_ok, bound_ok,
                               mass_ok, kr_ok)


# ---------------------------------------------------------------------------
# shared preparation


def _field_measure(u, threshold=_SUPPORT_THRESHOLD):
    # drop front cells below the support threshold so the measure never
    # carries atoms outside the ball the binding operator works on
    vals = np.where(u.values > threshold, u.values, 0.0)
    return field_to_measure(GridField(u.grid, vals, validate=False))


def _config_fingerprint(config, grid):
    inter = config.kernels.interaction
    chi = config.solver.chi
    doc = {
        "h": grid.h, "d": grid.d, "grid_shape": list(grid.shape),
        "domain_radius": config.solver.domain_radius,
        "epsilon": config.solver.epsilon,
        "cfl_safety": config.solver.cfl_safety,
        "mollifier_eps": config.solver.mollifier_eps,
        "chi": [chi.kind, chi.c],
        "rho": config.kernels.rho,
        "profile": [config.kernels.profile.kind, config.kernels.profile.f_max],
        "interaction": [inter.a_plus, inter.a_minus, inter.b_plus,
                        inter.b_minus, inter.s_cap],
        "K_plus": [inter.K_plus.kind, inter.K_plus.params],
        "K_minus": [inter.K_minus.kind, inter.K_minus.params],
        "T": config.T, "m": config.m, "m_inf": config.m_inf,
        "binding_every": config.binding_every,
        "binding_tol": config.binding_tol,
    }
    blob = json.dumps(doc, sort_keys=True, default=repr).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class _Prepared:
    u0: GridField
    nodes: binding.NodeSet
    cache: binding.GCache
    mu_anchor: object
    w0: binding.BindingField
    cert: binding.Certificate
    xinv: np.ndarray
    mu_u0: object
    horizon: Horizon
    report: AdmissibilityReport
    fingerprint: str


def _discrete_tv(values, h, d):
    # sum over axes of |forward differences| * h^(d-1): the discrete total
    # variation entering the KR rate estimate
    total = 0.0
    for k in range(d):
        total += float(np.abs(np.diff(values, axis=k)).sum()) * h ** (d - 1)
    return total


def _select_horizon(u0, w0, cert, config):
    """min(user T, supersolution containment horizon, KR budget horizon).

    The budget horizon divides r2 by an a-priori rate for d/dt KR(u(t), u0):
    advective flux bounded by v_sup * sup chi * m, diffusive flux by the
    discrete TV of eps*u0 + u0^2 (the monotone scheme does not create
    variation). All three are estimates; the runtime monitors are the
    actual enforcement.
    """
    kernels, solver = config.kernels, config.solver
    chi = solver.chi
    u_cap = config.headroom * max(u0.sup(), config.m_inf)
    chi_b = analysis.ChiBounds(chi.sup_on(u_cap), chi.dsup_on(u_cap))
    v_sup = kernels.profile.f_max * config.m

    w_ext = binding.extend_w(w0, u0.grid)
    V0 = pm_solver.assemble_velocity(kernels, w_ext, u0)
    div0 = pm_solver.divergence_sup(V0)
    div_budget = config.headroom * div0 + kernels.profile.f_max * config.m
    vb = analysis.VelocityBounds(v_sup, div_budget)
    stats = analysis.FieldStats(u0.sup(), u0.mass(),
                                analysis.support_radius(u0), u0.grid.d)
    try:
        _, t_support = analysis.support_constants(chi_b, vb, stats, kernels.rho)
    except AdmissibilityError:
        t_support = float("inf")

    rate = v_sup * chi_b.sup * config.m
    rate += _discrete_tv(solver.epsilon * u0.values + u0.values**2, u0.grid.h,
                         u0.grid.d)
    t_cert = cert.r2 / rate if rate > 0 else float("inf")

    T_eff = min(config.T, t_support, t_cert)
    return Horizon(config.T, t_support, t_cert, T_eff)


def _prepare(u0, config):
    solver = config.solver
    if solver.mollifier_eps > 0:
        u0 = pm_solver.mollify(u0, solver.mollifier_eps)
    if u0.grid.half_width < solver.domain_radius - 1e-12:
        raise AdmissibilityError(
            f"grid half-width {u0.grid.half_width} does not cover the "
            f"declared domain radius {solver.domain_radius}")
    kernels = config.kernels
    nodes = binding.NodeSet(u0.grid, kernels.rho)
    cache = binding.GCache(kernels, nodes)
    mu_anchor = config.mu0 if config.mu0 is not None else _field_measure(u0)

    w_start = binding.BindingField.constant(nodes, 0.5)
    anchor_tol = min(config.binding_tol, 1e-11)
    pic = binding.solve_binding_picard(kernels, mu_anchor, w_start, 0.0,
                                       tol=anchor_tol, max_iter=2000,
                                       strict=True, cache=cache)
    w0 = pic.w
    cert = binding.certificate(mu_anchor, w0, kernels, 0.0, cache=cache)
    xinv = binding.build_preconditioner(kernels, mu_anchor, w0, 0.0, cache=cache)

    horizon = _select_horizon(u0, w0, cert, config)
    report = admissible_initial(u0, mu_anchor, cert, kernels.rho,
                                config.m, config.m_inf)
    if not report.admissible and not config.override_admissibility:
        raise AdmissibilityError(
            "initial data fails admissibility checks: "
            + ", ".join(report.failed_checks()))
    return _Prepared(u0, nodes, cache, mu_anchor, w0, cert, xinv,
                     _field_measure(u0), horizon, report,
                     _config_fingerprint(config, u0.grid))


# ---------------------------------------------------------------------------
# monitors


class _Monitors:
    """Running maxima for the certified-ball conditions.

    The KR condition is enforced incrementally: KR(u_t, u0) <= kr_base +
    (diam/2) * L1(u_t, u_ref), with an exact re-solve (masses renormalized
    to absorb clip drift) whenever the incremental budget is spent.
    """

    def __init__(self, prep, config):
        self.prep = prep
        self.cert = prep.cert
        self.rho = config.kernels.rho
        self.diam = 2.0 * np.sqrt(prep.u0.grid.d) * self.rho
        self.kr_base = 0.0
        self.u_ref = prep.u0
        self.mass0 = prep.u0.mass()
        self.radius = pm_solver._radius_array(prep.u0.grid)
        self.maxima = {"support_radius": 0.0, "w_ball": 0.0, "kr_ball": 0.0,
                       "mass_drift": 0.0}
        self.w_margin_min = float("inf")
        self.kr_exact_solves = 0

    def support(self, u, t):
        live = u.values > _SUPPORT_THRESHOLD
        r = float(self.radius[live].max()) if live.any() else 0.0
        self.maxima["support_radius"] = max(self.maxima["support_radius"], r)
        if r > self.rho:
            raise CertificateBreach(
                f"support radius {r:.6g} left the ball of radius {self.rho}",
                t=t, monitor="support")
        return r

    def w_field(self, w, t):
        margin = min(float(w.values.min()), 1.0 - float(w.values.max()))
        self.w_margin_min = min(self.w_margin_min, margin)
        if margin <= 0.0:
            raise CertificateBreach(
                "binding fraction touched 0 or 1", t=t, monitor="w-range")
        dev = w.distance_w(self.prep.w0)
        self.maxima["w_ball"] = max(self.maxima["w_ball"], dev)
        if dev > self.cert.r1:
            raise CertificateBreach(
                f"|w - w0| = {dev:.6g} exceeds r1 = {self.cert.r1:.6g}",
                t=t, monitor="w-ball")

    def mass(self, u, t):
        drift = abs(u.mass() - self.mass0) / max(self.mass0, 1e-300)
        self.maxima["mass_drift"] = max(self.maxima["mass_drift"], drift)
        if drift > _MASS_DRIFT_TOL:
            raise CertificateBreach(
                f"relative mass drift {drift:.3e} exceeds {_MASS_DRIFT_TOL}",
                t=t, monitor="mass")

    def kr(self, u, t):
        bound = self.kr_base + 0.5 * self.diam * u.l1_distance(self.u_ref)
        if bound > self.cert.r2:
            mu_t = _field_measure(u).scaled(self.mass0 / u.mass())
            exact = kr_distance(mu_t, self.prep.mu_u0)
            self.kr_exact_solves += 1
            if exact > self.cert.r2:
                self.maxima["kr_ball"] = max(self.maxima["kr_ball"], exact)
                raise CertificateBreach(
                    f"KR(u(t), u0) = {exact:.6g} exceeds r2 = "
                    f"{self.cert.r2:.6g}", t=t, monitor="kr")
            self.kr_base, self.u_ref, bound = exact, u.copy(), exact
        self.maxima["kr_ball"] = max(self.maxima["kr_ball"], bound)

    def verdicts(self):
        return {
            "support_radius": {"max": self.maxima["support_radius"],
                               "bound": self.rho, "ok": True},
            "w_range_margin": {"min": self.w_margin_min, "bound": 0.0,
                               "ok": True},
            "w_ball": {"max": self.maxima["w_ball"], "bound": self.cert.r1,
                       "ok": True},
            "kr_ball": {"max": self.maxima["kr_ball"], "bound": self.cert.r2,
                        "ok": True},
            "mass_drift": {"max": self.maxima["mass_drift"],
                           "bound": _MASS_DRIFT_TOL, "ok": True},
            "kr_exact_solves": self.kr_exact_solves,
        }


def _solve_binding_step(prep, config, mu_t, w_start, t, stats):
    """Preconditioned solve warm-started from w_start; damped Picard fallback."""
    try:
        res = binding.solve_binding_preconditioned(
            config.kernels, mu_t, w_start, prep.xinv, t,
            tol=config.binding_tol, strict=True, cache=prep.cache)
        stats["max_iterations"] = max(stats["max_iterations"], res.iterations)
        stats["contraction_max"] = max(stats["contraction_max"],
                                       res.contraction_estimate)
    except NonConvergence as exc:
        stats["fallbacks"] += 1
        res = binding.solve_binding_picard(
            config.kernels, mu_t, exc.last, t, tol=config.binding_tol,
            max_iter=2000, strict=True, cache=prep.cache)
    stats["solves"] += 1
    return res.w


def _base_manifest(prep, config, mode):
    return {
        "schema": "adhesim-run/1",
        "mode": mode,
        "config_hash": prep.fingerprint,
        "certificate": prep.cert.to_json(),
        "horizon": prep.horizon.as_dict(),
        "admissibility": prep.report.as_dict(),
        "admissibility_overridden": not prep.report.admissible,
        "binding_every": config.binding_every,
    }


def manifest_to_json(result, path=None):
    if path is not None:
        with open(path, "w") as f:
            json.dump(result.manifest, f, indent=1)
    return result.manifest


# ---------------------------------------------------------------------------
# production mode: per-step lagged coupling


def run_time_marching(u0, config):
    """Advance the coupled system to the effective horizon.

    Per step: solve the binding equation at the current density (warm-started
    from the previous step), extend w off the ball, assemble the adhesion
    velocity, take one monotone PDE step. Samples (State, BindingField) are
    recorded at t=0, each requested output time, and the horizon.
    """
    prep = _prepare(u0, config)
    kernels, solver = config.kernels, config.solver
    u0 = prep.u0
    T = prep.horizon.T_effective
    mon = _Monitors(prep, config)
    stats = {"solves": 0, "max_iterations": 0, "fallbacks": 0,
             "contraction_max": 0.0}

    boundaries = sorted({float(s) for s in config.output_times if 0 < s < T})
    boundaries.append(T)

    t = 0.0
    u = u0
    r0 = mon.support(u, t)
    mu_t = _field_measure(u)
    w_n = _solve_binding_step(prep, config, mu_t, prep.w0, t, stats)
    mon.w_field(w_n, t)
    w_ext = binding.extend_w(w_n, u.grid)
    V = pm_solver.assemble_velocity(kernels, w_ext, u)

    state = pm_solver.State(0.0, u, {
        "mass": u.mass(), "max_u": u.sup(), "support_radius": r0, "dt": 0.0})
    samples = [CoupledSample(state, w_n)]
    if T <= 0:
        manifest = _base_manifest(prep, config, "time-marching")
        manifest["monitors"] = mon.verdicts()
        manifest["binding"] = stats
        manifest["contraction_factors"] = []
        return CoupledResult(samples, prep.horizon, prep.cert, prep.report,
                             manifest)

    steps_since_bind = 0
    dt_min, dt_max, n_steps = float("inf"), 0.0, 0
    for t_stop in boundaries:
        while t < t_stop - 1e-14 * max(T, 1.0):
            if steps_since_bind >= config.binding_every:
                mon.support(u, t)
                mu_t = _field_measure(u)
                w_n = _solve_binding_step(prep, config, mu_t, w_n, t, stats)
                mon.w_field(w_n, t)
                w_ext = binding.extend_w(w_n, u.grid)
                V = pm_solver.assemble_velocity(kernels, w_ext, u)
                steps_since_bind = 0
            dt = pm_solver.cfl_dt(state, V, solver, cap=t_stop - t)
            state = pm_solver.step(state, V, dt, solver)
            u = state.u
            t = state.t
            steps_since_bind += 1
            n_steps += 1
            dt_min, dt_max = min(dt_min, dt), max(dt_max, dt)
            mon.mass(u, t)
            mon.support(u, t)
            mon.kr(u, t)
        t = t_stop
        # re-solve at the boundary so the recorded pair is consistent
        mu_t = _field_measure(u)
        w_n = _solve_binding_step(prep, config, mu_t, w_n, t, stats)
        mon.w_field(w_n, t)
        w_ext = binding.extend_w(w_n, u.grid)
        V = pm_solver.assemble_velocity(kernels, w_ext, u)
        steps_since_bind = 0
        snap = pm_solver.State(t, u, {
            "mass": u.mass(), "max_u": u.sup(),
            "support_radius": mon.support(u, t),
            "dt_history": {"min": dt_min, "max": dt_max, "count": n_steps}})
        samples.append(CoupledSample(snap, w_n))

    manifest = _base_manifest(prep, config, "time-marching")
    manifest["monitors"] = mon.verdicts()
    manifest["binding"] = stats
    manifest["steps"] = n_steps
    manifest["dt"] = {"min": dt_min, "max": dt_max}
    manifest["contraction_factors"] = []
    return CoupledResult(samples, prep.horizon, prep.cert, prep.report,
                         manifest)


# ---------------------------------------------------------------------------
# validation mode: global Picard over trajectories


def run_global_picard(u0, config, tol=1e-9, max_outer=12):
    """Iterate trajectory -> binding solves at checkpoints -> fresh PDE solve.

    Starting from the constant-in-time trajectory u^(0) = u0, each outer pass
    freezes the w-trajectory computed from the previous density iterate and
    re-solves the PDE from u0. Stops when the sup-in-time L1 increment drops
    to tol; reports the empirical outer contraction factors.
    """
    prep = _prepare(u0, config)
    kernels, solver = config.kernels, config.solver
    u0 = prep.u0
    T = prep.horizon.T_effective
    mon = _Monitors(prep, config)
    stats = {"solves": 0, "max_iterations": 0, "fallbacks": 0,
             "contraction_max": 0.0}

    times = np.linspace(0.0, T, config.picard_checkpoints + 1)
    prev_states = [u0] * len(times)
    diffs, factors = [], []
    last_traj, last_w = None, None

    if T <= 0:
        return run_time_marching(u0, config)

    for outer in range(1, max_outer + 1):
        w_fields, w_ext = [], []
        w_prev = prep.w0
        for t_i, u_i in zip(times, prev_states):
            mon.support(u_i, float(t_i))
            mu_i = _field_measure(u_i)
            w_i = _solve_binding_step(prep, config, mu_i, w_prev, float(t_i),
                                      stats)
            mon.w_field(w_i, float(t_i))
            mon.kr(u_i, float(t_i))
            w_fields.append(w_i)
            w_ext.append(binding.extend_w(w_i, u0.grid))
            w_prev = w_i

        def w_of_t(t, _times=times, _fields=w_ext):
            idx = int(np.searchsorted(_times, t, side="right")) - 1
            return _fields[min(max(idx, 0), len(_fields) - 1)]

        traj = pm_solver.solve_fixed_w(u0, w_of_t, T, solver, kernels=kernels,
                                       output_times=list(times[1:-1]))
        new_states = [s.u for s in traj]
        diff = max(a.l1_distance(b) for a, b in zip(new_states, prev_states))
        diffs.append(diff)
        if len(diffs) >= 2 and diffs[-2] > 0:
            factors.append(diffs[-1] / diffs[-2])
        prev_states, last_traj, last_w = new_states, traj, w_fields
        if diff <= tol:
            break
    else:
        raise NonConvergence(
            f"global Picard did not contract to {tol} in {max_outer} outer "
            f"iterations (last increment {diffs[-1]:.3e})",
            last=last_traj, history=factors or diffs)

    samples = [CoupledSample(s, w) for s, w in zip(last_traj, last_w)]
    manifest = _base_manifest(prep, config, "global-picard")
    manifest["monitors"] = mon.verdicts()
    manifest["binding"] = stats
    manifest["outer_iterations"] = outer
    manifest["outer_increments"] = diffs
    manifest["contraction_factors"] = factors
    return CoupledResult(samples, prep.horizon, prep.cert, prep.report,
                         manifest)


# ---------------------------------------------------------------------------
# Lipschitz probe


def lipschitz_probe(u0_a, u0_b, config):
    """Paired-run sensitivity ratio

        (max_t L1(u_a - u_b) + max_t |w_a - w_b|_{W1,inf proxy}) / L1(u0_a - u0_b).

    Identical inputs short-circuit to an exact-match report instead of 0/0.
    Both inputs must pass admissibility (so a mass-violating perturbation is
    rejected before any run starts).
    """
    if not u0_a.grid.same_geometry(u0_b.grid):
        raise ValueError("probe inputs must live on the same grid")
    denom = u0_a.l1_distance(u0_b)
    if denom == 0.0:
        return LipschitzReport(0.0, True, 0.0, 0.0, 0.0)
    res_a = run_time_marching(u0_a, config)
    res_b = run_time_marching(u0_b, config)
    n = min(len(res_a.samples), len(res_b.samples))
    u_part = max(res_a.samples[i].state.u.l1_distance(res_b.samples[i].state.u)
                 for i in range(n))
    w_part = max(res_a.samples[i].w.distance_w(res_b.samples[i].w)
                 for i in range(n))
    return LipschitzReport((u_part + w_part) / denom, False, u_part, w_part,
                           denom, runs=(res_a, res_b))
