"""End-to-end acceptance runs, one criterion per test, one verdict line each.

Each test prints `criterion NN <name>: PASS/FAIL (<measured>; <time>)` and
enforces both the numeric tolerance and the runtime budget.
"""

import dataclasses
import time

import numpy as np
import pytest

from adhesim import analysis, binding, coupled, measures, pm_solver
from adhesim import kernels as kernels_mod

RHO = 0.25
H = 1 / 64


def make_kernels(d=1, kp=2.0, km=1.0, a=1.0):
    profile = kernels_mod.RadialProfile.constant(1.0)
    inter = kernels_mod.InteractionKernel(
        a, a, 2.0, 2.0,
        kernels_mod.constant_modulation(kp),
        kernels_mod.constant_modulation(km),
        s_cap=2 * RHO, d=d)
    return kernels_mod.KernelSet(d, RHO, profile, inter)


def symmetric_kernels(d=1):
    # a = 1e-12 makes phi+ and phi- numerically identical, so G+ == G-
    return make_kernels(d=d, kp=1.0, km=1.0, a=1e-12)


def binding_nodes(d=1, h=H):
    grid = measures.Grid.centered(RHO + 6 * h, h, d)
    return binding.NodeSet(grid, RHO)


def bump_field(grid, mass, radius, center=None):
    centers = grid.cell_centers()
    c = np.zeros(grid.d) if center is None else np.asarray(center, dtype=float)
    r = np.sqrt(((centers - c) ** 2).sum(axis=-1))
    vals = np.where(r < radius, np.cos(0.5 * np.pi * np.minimum(r / radius, 1)) ** 2, 0.0)
    total = vals.sum() * grid.h ** grid.d
    return measures.GridField(grid, vals * (mass / total))


def solver_config(h=H, radius=0.6, chi_c=0.5, epsilon=0.0):
    return pm_solver.SolverConfig(
        h=h, domain_radius=radius, epsilon=epsilon,
        chi=pm_solver.ChiFunction.saturating(chi_c))


def coupled_config(h, d, mass, T, chi_c=0.5, radius=0.6, m_inf=10.0, **kw):
    return coupled.CoupledConfig(
        kernels=make_kernels(d=d), solver=solver_config(h=h, radius=radius,
                                                        chi_c=chi_c),
        T=T, m=mass, m_inf=m_inf, **kw)


def verdict(num, name, budget, t0, ok, detail):
    elapsed = time.perf_counter() - t0
    in_budget = elapsed < budget
    status = "PASS" if (ok and in_budget) else "FAIL"
    print(f"criterion {num:02d} {name}: {status} ({detail}; "
          f"{elapsed:.2f}s of {budget:.0f}s)")
    assert ok, f"criterion {num}: {detail}"
    assert in_budget, f"criterion {num}: runtime {elapsed:.2f}s over {budget}s"


def test_criterion_01_point_mass_oracle():
    t0 = time.perf_counter()
    kernels = make_kernels(kp=4.0, km=1.0)
    nodes = binding_nodes()
    mu = measures.DiscreteMeasure([[H / 3]], [0.3], domain_radius=RHO)
    res = binding.solve_binding_picard(
        kernels, mu, binding.BindingField.constant(nodes, 0.5), 0.0,
        tol=1e-12, max_iter=2000, strict=True)
    w0 = res.w.values[nodes.origin_node()]
    err = abs(w0 - 2.0 / 3.0)
    verdict(1, "point-mass binding oracle", 1.0, t0, err <= 5 * H,
            f"w(0)={w0:.6f}, |err|={err:.2e} <= 5h={5 * H:.2e}")


def test_criterion_02_symmetric_fixed_point():
    t0 = time.perf_counter()
    kernels = symmetric_kernels()
    nodes = binding_nodes()
    u = bump_field(nodes.grid, 0.2, 0.1)
    mu = measures.field_to_measure(u)
    worst_dev, worst_res, worst_factor, have_ratio = 0.0, 0.0, 0.0, False
    for w_init in (0.0, 0.25, 0.5, 0.75, 1.0):
        res = binding.solve_binding_picard(
            kernels, mu, binding.BindingField.constant(nodes, w_init), 0.0,
            tol=1e-11, max_iter=2000, strict=True)
        worst_dev = max(worst_dev, float(np.abs(res.w.values - 0.5).max()))
        worst_res = max(worst_res, res.final_residual)
        ratios = [b / a for a, b in zip(res.history, res.history[1:]) if a > 0]
        if ratios:
            have_ratio = True
            worst_factor = max(worst_factor, max(ratios))
    ok = worst_dev <= 1e-9 and worst_res < 1e-10 and have_ratio and worst_factor < 1
    verdict(2, "symmetric fixed point", 1.0, t0, ok,
            f"max|w-0.5|={worst_dev:.1e}, residual={worst_res:.1e}, "
            f"contraction<={worst_factor:.2e}")


def test_criterion_03_jacobian_vs_finite_differences():
    t0 = time.perf_counter()
    kernels = make_kernels(kp=2.0, km=1.5)
    nodes = binding_nodes()
    rng = np.random.default_rng(42)
    step, worst = 1e-5, 0.0
    for _ in range(20):
        n_atoms = int(rng.integers(5, 16))
        pos = rng.uniform(-0.9 * RHO, 0.9 * RHO, (n_atoms, 1))
        # w enters through its value at each atom's node, so keep one atom
        # per node: the column-j difference quotient is then exact.
        node_of = nodes.nodes_of_positions(pos)
        _, keep = np.unique(node_of, return_index=True)
        pos, node_of = pos[keep], node_of[keep]
        wts = rng.uniform(0.05, 0.3, len(pos))
        mu = measures.DiscreteMeasure(pos, wts, domain_radius=RHO)
        w = binding.BindingField(nodes, rng.uniform(0.05, 0.95, nodes.n))
        J = binding.dY_dw_matrix(kernels, mu, w, 0.0)
        fd = np.zeros_like(J)
        for j, node in enumerate(node_of):
            wp = binding.BindingField(nodes, w.values.copy())
            wm = binding.BindingField(nodes, w.values.copy())
            wp.values[node] += step
            wm.values[node] -= step
            fd[:, j] = (binding.apply_Y(kernels, mu, wp, 0.0).values
                        - binding.apply_Y(kernels, mu, wm, 0.0).values) / (2 * step)
        worst = max(worst, float(np.abs(J - fd).max()))
    verdict(3, "jacobian vs central differences", 10.0, t0, worst <= 1e-6,
            f"max entry error={worst:.2e} <= 1e-6 on 20 states")


def test_criterion_04_preconditioned_contraction():
    t0 = time.perf_counter()
    kernels = make_kernels(kp=2.0, km=1.0)
    nodes = binding_nodes()
    u = bump_field(nodes.grid, 0.2, 0.1)
    mu0 = measures.field_to_measure(u)
    w0 = binding.solve_binding_picard(
        kernels, mu0, binding.BindingField.constant(nodes, 0.5), 0.0,
        tol=1e-12, max_iter=2000, strict=True).w
    cert = binding.certificate(mu0, w0, kernels, 0.0)
    xinv = binding.build_preconditioner(kernels, mu0, w0, 0.0)

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        # weight-perturbed copy of the anchor, rescaled back into the KR ball
        gains = 1.0 + 0.2 * rng.uniform(-1, 1, len(mu0.weights))
        wts = mu0.weights * gains
        wts *= mu0.total_mass() / wts.sum()
        mu = measures.DiscreteMeasure(mu0.positions, wts, mu0.domain_radius)
        dist = measures.kr_distance(mu, mu0)
        if dist > 0.5 * cert.r2:
            lam = 0.5 * cert.r2 / dist
            wts = mu0.weights + lam * (wts - mu0.weights)
            mu = measures.DiscreteMeasure(mu0.positions, wts, mu0.domain_radius)
            dist = measures.kr_distance(mu, mu0)
        assert dist <= cert.r2
        res = binding.solve_binding_preconditioned(
            kernels, mu, w0, xinv, 0.0, tol=1e-12, max_iter=500, strict=True)
        worst = max(worst, res.contraction_estimate)
    verdict(4, "preconditioned contraction", 30.0, t0, worst <= 0.55,
            f"max factor={worst:.3f} <= 0.55 across 10 measures in the ball")


def run_certified(h, d, mass, radius_bump, chi_c=0.5, T=1.0, **kw):
    cfg = coupled_config(h=h, d=d, mass=mass, T=T, chi_c=chi_c, **kw)
    grid = measures.Grid.centered(cfg.solver.domain_radius, h, d)
    u0 = bump_field(grid, mass, radius_bump)
    return coupled.run_time_marching(u0, cfg), u0


def test_criterion_05_mass_conservation_coupled():
    t0 = time.perf_counter()
    res1, u0_1 = run_certified(h=1 / 128, d=1, mass=0.15, radius_bump=0.04)
    drift1 = abs(res1.samples[-1].state.u.mass() - u0_1.mass()) / u0_1.mass()
    res2, u0_2 = run_certified(h=1 / 64, d=2, mass=0.02, radius_bump=0.06)
    drift2 = abs(res2.samples[-1].state.u.mass() - u0_2.mass()) / u0_2.mass()
    ok = drift1 <= 1e-8 and drift2 <= 1e-8
    verdict(5, "coupled mass conservation", 60.0, t0, ok,
            f"1d drift={drift1:.1e}, 2d drift={drift2:.1e}, horizons "
            f"{res1.horizon.T_effective:.2e}/{res2.horizon.T_effective:.2e}")


def test_criterion_06_zkb_convergence_order():
    t0 = time.perf_counter()
    t_init, t_end, mass, radius = 0.25, 0.5, 1.0, 2.0
    C = analysis.zkb_constant_for_mass(mass, 1)
    errors, hs = [], []
    for n in (64, 128, 256):
        h = 1.0 / n
        grid = measures.Grid.centered(radius, h, 1)
        centers = grid.cell_centers()
        u0 = measures.GridField(grid, analysis.zkb_solution(t_init, centers, C, 1))
        cfg = pm_solver.SolverConfig(h=h, domain_radius=radius,
                                     chi=pm_solver.ChiFunction.linear(0.0))
        final = pm_solver.solve_fixed_w(u0, 0.0, t_end - t_init, cfg)[-1]
        exact = analysis.zkb_solution(t_end, centers, C, 1)
        errors.append(float(np.abs(final.u.values - exact).sum() * h))
        hs.append(h)
    order = float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
    verdict(6, "zkb L1 convergence", 120.0, t0, order >= 0.8,
            f"errors={[f'{e:.2e}' for e in errors]}, fitted order={order:.2f} >= 0.8")


def test_criterion_07_support_containment():
    t0 = time.perf_counter()
    h, d, mass = H, 1, 0.1
    cfg = coupled_config(h=h, d=d, mass=mass, T=1.0,
                         output_times=tuple(np.linspace(1e-5, 2e-4, 8)))
    grid = measures.Grid.centered(cfg.solver.domain_radius, h, d)
    u0 = bump_field(grid, mass, 0.05)  # support well inside rho/4
    result = coupled.run_time_marching(u0, cfg)

    # the same bounds the horizon selection feeds to the supersolution lemma
    chi = cfg.solver.chi
    u_cap = cfg.headroom * max(u0.sup(), cfg.m_inf)
    chi_b = analysis.ChiBounds(chi.sup_on(u_cap), chi.dsup_on(u_cap))
    w_ext = binding.extend_w(result.samples[0].w, grid)
    V0 = pm_solver.assemble_velocity(cfg.kernels, w_ext, u0)
    v_sup = cfg.kernels.profile.f_max * mass
    vb = analysis.VelocityBounds(
        v_sup, cfg.headroom * pm_solver.divergence_sup(V0) + v_sup)
    stats = analysis.FieldStats(u0.sup(), u0.mass(),
                                analysis.support_radius(u0), d)
    params, t_support = analysis.support_constants(chi_b, vb, stats, RHO)
    assert params.delta == 0.25 and params.b == RHO / 2

    checked, margin = 0, np.inf
    for sample in result.samples:
        t = sample.state.t
        if t > t_support:
            continue
        r = sample.state.diagnostics.get("support_radius",
                                         analysis.support_radius(sample.state.u))
        envelope = params.b * np.exp(4.0 * params.a * t) + h
        margin = min(margin, envelope - r)
        assert r < RHO
        checked += 1
    ok = checked >= 2 and margin >= 0
    verdict(7, "supersolution support control", 60.0, t0, ok,
            f"{checked} samples inside t_support={t_support:.2e}, "
            f"min envelope margin={margin:.2e}")


def test_criterion_08_comparison_principle():
    t0 = time.perf_counter()
    kernels = make_kernels(kp=1.0, km=1.0)
    cfg = solver_config()
    grid = measures.Grid.centered(cfg.domain_radius, H, 1)
    rng = np.random.default_rng(3)
    worst = -np.inf
    for _ in range(10):
        hi = bump_field(grid, 0.2, 0.1)
        extra = bump_field(grid, float(rng.uniform(0.02, 0.08)),
                           float(rng.uniform(0.04, 0.08)),
                           center=[float(rng.uniform(-0.1, 0.1))])
        hi = measures.GridField(grid, hi.values + extra.values)
        lo = measures.GridField(grid, hi.values * float(rng.uniform(0.3, 0.9)))
        V = pm_solver.assemble_velocity(kernels, 1.0, hi)
        s_hi = pm_solver.State(0.0, hi)
        s_lo = pm_solver.State(0.0, lo)
        dt = 0.5 * min(pm_solver.cfl_dt(s_hi, V, cfg),
                       pm_solver.cfl_dt(s_lo, V, cfg))
        for _ in range(20):
            s_hi = pm_solver.step(s_hi, V, dt, cfg)
            s_lo = pm_solver.step(s_lo, V, dt, cfg)
            worst = max(worst, float((s_lo.u.values - s_hi.u.values).max()))
    verdict(8, "discrete comparison principle", 60.0, t0, worst <= 1e-10,
            f"max(u_lo - u_hi)={worst:.1e} <= 1e-10 over 10 pairs x 20 steps")


def test_criterion_09_kr_module():
    t0 = time.perf_counter()
    delta_a = measures.DiscreteMeasure([[0.2]], [1.0], domain_radius=1.0)
    delta_b = measures.DiscreteMeasure([[0.5]], [1.0], domain_radius=1.0)
    pair_err = abs(measures.kr_distance(delta_a, delta_b) - 0.3)

    rng = np.random.default_rng(11)
    cdf_lp_gap, bound_margin = 0.0, np.inf
    for _ in range(100):
        n1, n2 = rng.integers(2, 25, size=2)
        mu1 = measures.DiscreteMeasure(rng.uniform(-1, 1, (n1, 1)),
                                       rng.uniform(0.1, 1.0, n1), 1.0)
        wts2 = rng.uniform(0.1, 1.0, n2)
        wts2 *= mu1.total_mass() / wts2.sum()
        mu2 = measures.DiscreteMeasure(rng.uniform(-1, 1, (n2, 1)), wts2, 1.0)
        d_cdf = measures.kr_distance(mu1, mu2, method="cdf")
        d_lp = measures.kr_distance(mu1, mu2, method="lp")
        cdf_lp_gap = max(cdf_lp_gap, abs(d_cdf - d_lp))
        union = np.vstack([mu1.positions, mu2.positions])
        diam = float(np.abs(union[:, None, :] - union[None, :, :]).max())
        tv = float(mu1.weights.sum() + mu2.weights.sum())
        bound_margin = min(bound_margin, 0.5 * diam * tv - d_cdf)
    ok = pair_err <= 1e-15 and cdf_lp_gap <= 1e-9 and bound_margin >= -1e-12
    verdict(9, "kr distance module", 30.0, t0, ok,
            f"delta-pair err={pair_err:.1e}, cdf-lp gap={cdf_lp_gap:.1e}, "
            f"min (diam/2)TV margin={bound_margin:.2e} on 100 pairs")


def test_criterion_10_mode_agreement():
    t0 = time.perf_counter()
    h, mass = H, 0.2
    cfg = coupled_config(h=h, d=1, mass=mass, T=1e-4, picard_checkpoints=8)
    grid = measures.Grid.centered(cfg.solver.domain_radius, h, 1)
    u0 = bump_field(grid, mass, 0.04)

    # picard first: its checkpoints sit at fractions of the effective
    # horizon, which only the run itself knows
    picard = coupled.run_global_picard(u0, cfg, tol=1e-12)
    times = [s.state.t for s in picard.samples]
    march_cfg = dataclasses.replace(cfg, output_times=tuple(times[1:-1]))
    march = coupled.run_time_marching(u0, march_cfg)

    by_t = {round(s.state.t, 15): s.state.u for s in march.samples}
    gap, matched = 0.0, 0
    for s in picard.samples:
        key = round(s.state.t, 15)
        if key in by_t:
            gap = max(gap, by_t[key].l1_distance(s.state.u))
            matched += 1
    dt_max = march.manifest["dt"]["max"]
    allowed = 5.0 * (dt_max + h) * mass
    factors = picard.manifest["contraction_factors"]
    ok = (matched == len(times) and gap <= allowed
          and len(factors) >= 1 and all(f < 1 for f in factors))
    verdict(10, "marching vs global picard", 180.0, t0, ok,
            f"{matched} shared checkpoints, max_t L1 gap={gap:.2e} <= "
            f"{allowed:.2e}, outer factors={[f'{f:.2e}' for f in factors]}")


def perturbed_pair(grid, mass, scale):
    base = bump_field(grid, mass, 0.04)
    vals = base.values.copy()
    j = int(np.argmax(vals))
    moved = scale * mass / grid.h
    vals[j] -= moved
    vals[j + 1] += moved
    return base, measures.GridField(grid, vals)


def test_criterion_11_lipschitz_probe():
    t0 = time.perf_counter()
    h, mass = H, 0.2
    cfg = coupled_config(h=h, d=1, mass=mass, T=1e-4)
    grid = measures.Grid.centered(cfg.solver.domain_radius, h, 1)
    ratios = []
    for scale in (1e-3, 5e-4):
        u0a, u0b = perturbed_pair(grid, mass, scale)
        rep = coupled.lipschitz_probe(u0a, u0b, cfg)
        assert np.isfinite(rep.ratio) and rep.ratio > 0
        ratios.append(rep.ratio)
    change = ratios[0] / ratios[1]
    ok = 0.5 < change < 2.0
    verdict(11, "lipschitz probe stability", 120.0, t0, ok,
            f"ratio(d)={ratios[0]:.3f}, ratio(d/2)={ratios[1]:.3f}, "
            f"change={change:.2f}x in (0.5, 2)")
