"""JSON config front door and the ``adhesim`` command-line driver.

parse_config reads a versioned JSON document ("adhesim-config/1"), rejects
unknown keys anywhere in the tree so a typo cannot silently become a default,
and validates every field against the same rules the library constructors
enforce, naming the offending entry by dot-path.  run() dispatches the
subcommands (simulate, picard, binding-solve, certificate, kr, oracle,
convergence), writes CSV snapshots and a JSON manifest into --out, and maps
the error taxonomy onto stable exit codes:

    0  success
    2  config or input rejected (ParseError, ValidationError, bad value)
    3  state rejected (admissibility, domain, mass, CFL, monitored bounds)
    4  certified monitor radius breached mid-run
    5  iterative solve failed to converge / singular linearization
    1  anything unexpected

All floats written to CSV use 17 significant digits; identical configs
produce byte-identical artifacts.
"""

import argparse
import contextlib
import copy
import importlib.resources
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import analysis, binding, coupled, kernels as kernels_mod, measures, pm_solver
from .errors import (
    AdhesimError,
    AdmissibilityError,
    BoundBreach,
    CertificateBreach,
    CFLViolation,
    DegenerateState,
    DomainError,
    EmptyMeasure,
    MassMismatch,
    NegativityBreach,
    NonConvergence,
    ParseError,
    SingularPreconditioner,
    SingularX,
    ValidationError,
)

SCHEMA_VERSION = "adhesim-config/1"

_CHI_KINDS = ("linear", "saturating", "exp_saturating")
_PROFILE_KINDS = ("constant", "linear_decay", "quadratic_decay")
_MODULATION_KINDS = ("constant", "gaussian_x", "affine_t")
_INITIAL_KINDS = ("bump", "indicator", "zkb")

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _fmt(x):
    """Fixed 17-significant-digit formatting for CSV bodies."""
    return "%.17g" % float(x)


def _show(x):
    """Shortest round-trip formatting for stdout headlines."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# typed field extraction; every rejection names the dot-path and the rule


def _expect_dict(value, path):
    if not isinstance(value, dict):
        raise ValidationError(path, "must be an object")
    return value


def _expect_list(value, path):
    if not isinstance(value, list):
        raise ValidationError(path, "must be an array")
    return value


def _expect_number(value, path, lo=None, hi=None, lo_open=False, hi_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(path, "must be a number")
    v = float(value)
    if not np.isfinite(v):
        raise ValidationError(path, "must be finite")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ValidationError(path, f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ValidationError(path, f"must be {'<' if hi_open else '<='} {hi}")
    return v


def _expect_int(value, path, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(path, "must be an integer")
    if lo is not None and value < lo:
        raise ValidationError(path, f"must be >= {lo}")
    return int(value)


def _expect_bool(value, path):
    if not isinstance(value, bool):
        raise ValidationError(path, "must be true or false")
    return value


def _expect_choice(value, path, choices):
    if not isinstance(value, str) or value not in choices:
        raise ValidationError(path, "must be one of " + ", ".join(repr(c) for c in choices))
    return value


def _reject_unknown(section, allowed, path):
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ValidationError(where, "unknown key")


def _required(section, key, path):
    if key not in section:
        raise ValidationError(f"{path}.{key}" if path else key, "required")
    return section[key]


# ---------------------------------------------------------------------------
# section validators; each returns the normalized sub-document


def _v_grid(doc):
    sec = _expect_dict(_required(doc, "grid", ""), "grid")
    _reject_unknown(sec, ("h", "radius", "d"), "grid")
    h = _expect_number(_required(sec, "h", "grid"), "grid.h", lo=0, lo_open=True)
    radius = _expect_number(_required(sec, "radius", "grid"), "grid.radius",
                            lo=0, lo_open=True)
    d = _expect_int(_required(sec, "d", "grid"), "grid.d")
    if d not in (1, 2):
        raise ValidationError("grid.d", "must be 1 or 2")
    return {"h": h, "radius": radius, "d": d}


def _v_chi(sec):
    sec = _expect_dict(sec, "solver.chi")
    _reject_unknown(sec, ("kind", "c"), "solver.chi")
    kind = _expect_choice(_required(sec, "kind", "solver.chi"),
                          "solver.chi.kind", _CHI_KINDS)
    c = _expect_number(sec.get("c", 1.0), "solver.chi.c", lo=0)
    return {"kind": kind, "c": c}


def _v_solver(doc):
    sec = _expect_dict(doc.get("solver", {}), "solver")
    _reject_unknown(sec, ("epsilon", "cfl_safety", "mollifier_eps", "chi"), "solver")
    out = {
        "epsilon": _expect_number(sec.get("epsilon", 0.0), "solver.epsilon", lo=0),
        "cfl_safety": _expect_number(sec.get("cfl_safety", 0.4), "solver.cfl_safety",
                                     lo=0, hi=1, lo_open=True, hi_open=True),
        "mollifier_eps": _expect_number(sec.get("mollifier_eps", 0.0),
                                        "solver.mollifier_eps", lo=0),
        "chi": _v_chi(sec.get("chi", {"kind": "saturating", "c": 1.0})),
    }
    return out


def _v_modulation(sec, path):
    sec = _expect_dict(sec, path)
    kind = _expect_choice(_required(sec, "kind", path), f"{path}.kind",
                          _MODULATION_KINDS)
    if kind == "constant":
        _reject_unknown(sec, ("kind", "value"), path)
        return {"kind": kind,
                "value": _expect_number(_required(sec, "value", path),
                                        f"{path}.value", lo=0, lo_open=True)}
    if kind == "gaussian_x":
        _reject_unknown(sec, ("kind", "value", "sigma"), path)
        return {"kind": kind,
                "value": _expect_number(_required(sec, "value", path),
                                        f"{path}.value", lo=0, lo_open=True),
                "sigma": _expect_number(_required(sec, "sigma", path),
                                        f"{path}.sigma", lo=0, lo_open=True)}
    _reject_unknown(sec, ("kind", "value", "slope"), path)
    return {"kind": kind,
            "value": _expect_number(_required(sec, "value", path),
                                    f"{path}.value", lo=0, lo_open=True),
            "slope": _expect_number(sec.get("slope", 0.0), f"{path}.slope")}


def _v_kernels(doc):
    if "kernels" not in doc:
        return None
    sec = _expect_dict(doc["kernels"], "kernels")
    _reject_unknown(sec, ("rho", "s_cap", "profile", "interaction",
                          "K_plus", "K_minus"), "kernels")

    rho = _expect_number(_required(sec, "rho", "kernels"), "kernels.rho",
                         lo=0, lo_open=True)
    if rho >= 0.5:
        raise ValidationError(
            "kernels.rho",
            "sensing radius must satisfy rho < 1/2 when binding is enabled")

    s_cap = _expect_number(sec.get("s_cap", 2.0 * rho), "kernels.s_cap",
                           lo=0, hi=1, lo_open=True, hi_open=True)

    prof = _expect_dict(sec.get("profile", {"kind": "constant", "value": 1.0}),
                        "kernels.profile")
    _reject_unknown(prof, ("kind", "value"), "kernels.profile")
    prof_out = {
        "kind": _expect_choice(_required(prof, "kind", "kernels.profile"),
                               "kernels.profile.kind", _PROFILE_KINDS),
        "value": _expect_number(prof.get("value", 1.0), "kernels.profile.value",
                                lo=0, lo_open=True),
    }

    inter = _expect_dict(_required(sec, "interaction", "kernels"),
                         "kernels.interaction")
    _reject_unknown(inter, ("a_plus", "a_minus", "b_plus", "b_minus"),
                    "kernels.interaction")
    inter_out = {}
    for name in ("a_plus", "a_minus"):
        v = _expect_number(_required(inter, name, "kernels.interaction"),
                           f"kernels.interaction.{name}")
        if v <= 0:
            raise ValidationError(f"kernels.interaction.{name}",
                                  "interaction exponents a± must be positive")
        inter_out[name] = v
    for name in ("b_plus", "b_minus"):
        inter_out[name] = _expect_number(
            _required(inter, name, "kernels.interaction"),
            f"kernels.interaction.{name}", lo=2)

    return {
        "rho": rho,
        "s_cap": s_cap,
        "profile": prof_out,
        "interaction": inter_out,
        "K_plus": _v_modulation(_required(sec, "K_plus", "kernels"), "kernels.K_plus"),
        "K_minus": _v_modulation(_required(sec, "K_minus", "kernels"), "kernels.K_minus"),
    }


def _v_initial(doc, grid):
    sec = _expect_dict(_required(doc, "initial", ""), "initial")
    kind = _expect_choice(_required(sec, "kind", "initial"), "initial.kind",
                          _INITIAL_KINDS)
    d, radius = grid["d"], grid["radius"]

    def center_of():
        c = sec.get("center", [0.0] * d)
        c = _expect_list(c, "initial.center")
        if len(c) != d:
            raise ValidationError("initial.center", f"must have {d} coordinates")
        return [_expect_number(ci, f"initial.center[{i}]") for i, ci in enumerate(c)]

    if kind in ("bump", "indicator"):
        keys = ("kind", "radius", "center") + (("mass",) if kind == "bump" else ("height",))
        _reject_unknown(sec, keys, "initial")
        r = _expect_number(_required(sec, "radius", "initial"), "initial.radius",
                           lo=0, lo_open=True)
        center = center_of()
        if max(abs(ci) for ci in center) + r > radius + 1e-12:
            raise ValidationError("initial.center",
                                  "profile leaves the computational domain")
        out = {"kind": kind, "radius": r, "center": center}
        if kind == "bump":
            out["mass"] = _expect_number(_required(sec, "mass", "initial"),
                                         "initial.mass", lo=0, lo_open=True)
        else:
            out["height"] = _expect_number(_required(sec, "height", "initial"),
                                           "initial.height", lo=0, lo_open=True)
        return out

    _reject_unknown(sec, ("kind", "t0", "mass"), "initial")
    return {"kind": kind,
            "t0": _expect_number(_required(sec, "t0", "initial"), "initial.t0",
                                 lo=0, lo_open=True),
            "mass": _expect_number(_required(sec, "mass", "initial"),
                                   "initial.mass", lo=0, lo_open=True)}


def _v_run(doc, have_kernels):
    sec = _expect_dict(_required(doc, "run", ""), "run")
    _reject_unknown(sec, ("T", "m", "m_inf", "w_mode", "w_value", "output_times",
                          "binding_every", "binding_tol", "picard_checkpoints",
                          "picard_tol", "picard_max_outer",
                          "override_admissibility", "headroom"), "run")

    T = _expect_number(_required(sec, "T", "run"), "run.T", lo=0)
    w_mode = _expect_choice(sec.get("w_mode", "coupled" if have_kernels else "fixed"),
                            "run.w_mode", ("coupled", "fixed"))

    out = {"T": T, "w_mode": w_mode}

    if "w_value" in sec and w_mode != "fixed":
        raise ValidationError("run.w_value",
                              "only meaningful when run.w_mode is 'fixed'")
    if w_mode == "fixed":
        out["w_value"] = _expect_number(sec.get("w_value", 0.0), "run.w_value",
                                        lo=0, hi=1)

    if w_mode == "coupled":
        if not have_kernels:
            raise ValidationError("kernels",
                                  "required when run.w_mode is 'coupled'")
        if "m_inf" not in sec:
            raise ValidationError("run.m_inf",
                                  "required when run.w_mode is 'coupled'")
        out["m_inf"] = _expect_number(sec["m_inf"], "run.m_inf", lo=0, lo_open=True)
    elif "m_inf" in sec:
        out["m_inf"] = _expect_number(sec["m_inf"], "run.m_inf", lo=0, lo_open=True)

    if "m" in sec:
        out["m"] = _expect_number(sec["m"], "run.m", lo=0, lo_open=True)

    times = _expect_list(sec.get("output_times", []), "run.output_times")
    prev = 0.0
    for i, t in enumerate(times):
        t = _expect_number(t, f"run.output_times[{i}]")
        if not prev < t < T:
            raise ValidationError(f"run.output_times[{i}]",
                                  "must be strictly increasing inside (0, T)")
        prev = t
    out["output_times"] = [float(t) for t in times]

    out["binding_every"] = _expect_int(sec.get("binding_every", 1),
                                       "run.binding_every", lo=1)
    out["binding_tol"] = _expect_number(sec.get("binding_tol", 1e-10),
                                        "run.binding_tol", lo=0, lo_open=True)
    out["picard_checkpoints"] = _expect_int(sec.get("picard_checkpoints", 8),
                                            "run.picard_checkpoints", lo=1)
    out["picard_tol"] = _expect_number(sec.get("picard_tol", 1e-9),
                                       "run.picard_tol", lo=0, lo_open=True)
    out["picard_max_outer"] = _expect_int(sec.get("picard_max_outer", 12),
                                          "run.picard_max_outer", lo=1)
    out["override_admissibility"] = _expect_bool(
        sec.get("override_admissibility", False), "run.override_admissibility")
    out["headroom"] = _expect_number(sec.get("headroom", 2.0), "run.headroom", lo=1)
    return out


# ---------------------------------------------------------------------------
# parsed configuration


@dataclass
class ParsedConfig:
    """Validated, normalized configuration plus builders for library objects.

    doc is the normalized document (defaults made explicit); re-parsing it
    yields an equivalent config, which is how run manifests stay replayable.
    """

    doc: dict

    @property
    def d(self):
        return self.doc["grid"]["d"]

    @property
    def w_mode(self):
        return self.doc["run"]["w_mode"]

    def build_grid(self):
        g = self.doc["grid"]
        return measures.Grid.centered(g["radius"], g["h"], g["d"])

    def build_solver(self):
        s = self.doc["solver"]
        chi = pm_solver.ChiFunction(s["chi"]["kind"], s["chi"]["c"])
        return pm_solver.SolverConfig(
            h=self.doc["grid"]["h"],
            domain_radius=self.doc["grid"]["radius"],
            chi=chi,
            epsilon=s["epsilon"],
            cfl_safety=s["cfl_safety"],
            mollifier_eps=s["mollifier_eps"],
        )

    def build_kernels(self):
        sec = self.doc.get("kernels")
        if sec is None:
            return None
        prof = sec["profile"]
        profile = {
            "constant": kernels_mod.RadialProfile.constant,
            "linear_decay": kernels_mod.RadialProfile.linear_decay,
            "quadratic_decay": kernels_mod.RadialProfile.quadratic_decay,
        }[prof["kind"]](prof["value"])
        mods = []
        for side in ("K_plus", "K_minus"):
            m = sec[side]
            if m["kind"] == "constant":
                mods.append(kernels_mod.constant_modulation(m["value"]))
            elif m["kind"] == "gaussian_x":
                mods.append(kernels_mod.gaussian_x_modulation(m["value"], m["sigma"]))
            else:
                mods.append(kernels_mod.affine_t_modulation(m["value"], m["slope"]))
        inter = sec["interaction"]
        interaction = kernels_mod.InteractionKernel(
            inter["a_plus"], inter["a_minus"], inter["b_plus"], inter["b_minus"],
            mods[0], mods[1], s_cap=sec["s_cap"], d=self.d)
        return kernels_mod.KernelSet(self.d, sec["rho"], profile, interaction)

    def build_u0(self, grid=None):
        grid = grid or self.build_grid()
        sec = self.doc["initial"]
        centers = grid.cell_centers()
        if sec["kind"] == "zkb":
            C = analysis.zkb_constant_for_mass(sec["mass"], grid.d)
            vals = analysis.zkb_solution(sec["t0"], centers, C, grid.d)
            return measures.GridField(grid, vals)
        center = np.asarray(sec["center"], dtype=float)
        r = np.sqrt(((centers - center) ** 2).sum(axis=-1))
        if sec["kind"] == "indicator":
            vals = np.where(r <= sec["radius"], sec["height"], 0.0)
            return measures.GridField(grid, vals)
        vals = np.where(r < sec["radius"],
                        np.cos(0.5 * np.pi * np.minimum(r / sec["radius"], 1.0)) ** 2,
                        0.0)
        total = vals.sum() * grid.h ** grid.d
        if total <= 0:
            raise ValidationError("initial.radius",
                                  "bump support contains no grid cells")
        return measures.GridField(grid, vals * (sec["mass"] / total))

    def declared_mass(self, u0):
        return self.doc["run"].get("m") or u0.mass()

    def coupled_config(self, u0):
        run = self.doc["run"]
        return coupled.CoupledConfig(
            kernels=self.build_kernels(),
            solver=self.build_solver(),
            T=run["T"],
            m=self.declared_mass(u0),
            m_inf=run["m_inf"],
            binding_every=run["binding_every"],
            binding_tol=run["binding_tol"],
            output_times=tuple(run["output_times"]),
            picard_checkpoints=run["picard_checkpoints"],
            override_admissibility=run["override_admissibility"],
            headroom=run["headroom"],
        )


def validate_doc(doc):
    """Validate a decoded config document; returns the normalized ParsedConfig."""
    doc = _expect_dict(doc, "<config>")
    _reject_unknown(doc, ("schema", "grid", "solver", "kernels", "initial",
                          "run", "seed"), "")
    schema = _required(doc, "schema", "")
    if schema != SCHEMA_VERSION:
        raise ValidationError("schema",
                              f"unsupported value {schema!r}, expected {SCHEMA_VERSION!r}")

    grid = _v_grid(doc)
    kern = _v_kernels(doc)
    if kern is not None and grid["radius"] <= kern["rho"]:
        raise ValidationError("grid.radius",
                              "domain must contain the sensing ball (radius > kernels.rho)")
    run = _v_run(doc, kern is not None)
    if run["w_mode"] == "fixed" and run.get("w_value", 0.0) > 0 and kern is None:
        raise ValidationError("kernels",
                              "required when w_value > 0 (adhesion velocity "
                              "needs interaction kernels)")

    norm = {
        "schema": SCHEMA_VERSION,
        "grid": grid,
        "solver": _v_solver(doc),
        "initial": _v_initial(doc, grid),
        "run": run,
        "seed": _expect_int(doc.get("seed", 0), "seed", lo=0),
    }
    if kern is not None:
        norm["kernels"] = kern
    return ParsedConfig(norm)


def parse_config(path):
    """Read and validate a JSON config file.

    Raises ParseError when the file cannot be read or decoded, and
    ValidationError (carrying the dot-path and the violated rule) when a
    field is missing, unknown, or out of range.
    """
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_doc(doc)


# ---------------------------------------------------------------------------
# CLI plumbing


@contextlib.contextmanager
def _phase(module, operation):
    """Tag escaping exceptions with the innermost module/operation context."""
    try:
        yield
    except BaseException as exc:
        if not hasattr(exc, "_adhesim_phase"):
            exc._adhesim_phase = (module, operation)
        raise


def _apply_thread_cap():
    """Honor ADHESIM_THREADS by capping the BLAS/OpenMP pools.

    Orchestration is single threaded; the cap only constrains data-parallel
    library kernels underneath, and takes full effect when exported before
    the interpreter starts.
    """
    raw = os.environ.get("ADHESIM_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError("ADHESIM_THREADS", "must be a positive integer")
    if n < 1:
        raise ValidationError("ADHESIM_THREADS", "must be a positive integer")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)
    return n


def _apply_overrides(doc, overrides):
    """Apply --override key=value entries (dot-paths, JSON-literal values)."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValidationError("--override", f"expected key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(key, "path runs through a non-object value")
        node[parts[-1]] = value
    return doc


def _load_config(args):
    with _phase("cli_io", "parse_config"):
        if args.override:
            cfg = parse_config(args.config)
            doc = _apply_overrides(copy.deepcopy(cfg.doc), args.override)
            return validate_doc(doc)
        return parse_config(args.config)


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _say(args, text):
    if not args.quiet:
        print(text)


def _write_rows_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _w_to_csv(w, path):
    cols = w.nodes.positions.shape[1]
    header = ",".join(f"x{k}" for k in range(cols)) + ",w"
    rows = np.column_stack([w.nodes.positions, w.values])
    _write_rows_csv(path, header, rows)


def _base_manifest(command, cfg, threads):
    return {"command": command, "config": cfg.doc, "threads": threads}


def _write_samples(result, out):
    """CSV per sample (u on the grid, w on the binding nodes); returns the index."""
    index = []
    for i, sample in enumerate(result.samples):
        u_name = f"u_{i:04d}.csv"
        pm_solver.snapshot_to_csv(sample.state, os.path.join(out, u_name))
        entry = {"t": sample.state.t, "u": u_name}
        if sample.w is not None:
            w_name = f"w_{i:04d}.csv"
            _w_to_csv(sample.w, os.path.join(out, w_name))
            entry["w"] = w_name
        index.append(entry)
    return index


def _finish_coupled(args, cfg, result, command, threads):
    out = _outdir(args)
    manifest = dict(result.manifest)
    manifest.update(_base_manifest(command, cfg, threads))
    manifest["outputs"] = _write_samples(result, out)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    result.certificate.to_json(os.path.join(out, "certificate.json"))
    last = result.samples[-1].state
    _say(args, f"T_effective = {_show(result.horizon.T_effective)}")
    _say(args, f"final mass = {_show(last.u.mass())}  sup u = {_show(last.u.values.max())}")
    _say(args, f"wrote {len(result.samples)} snapshots to {out}")
    return 0


# ---------------------------------------------------------------------------
# subcommands


def _prepare_common(args, need_kernels=False):
    cfg = _load_config(args)
    if need_kernels and "kernels" not in cfg.doc:
        raise ValidationError("kernels", f"required for {args.command}")
    with _phase("cli_io", "build"):
        u0 = cfg.build_u0()
    return cfg, u0


def _cmd_simulate(args, threads):
    cfg, u0 = _prepare_common(args)
    if cfg.w_mode == "coupled":
        with _phase("coupled", "run_time_marching"):
            result = coupled.run_time_marching(u0, cfg.coupled_config(u0))
        return _finish_coupled(args, cfg, result, "simulate", threads)

    run = cfg.doc["run"]
    with _phase("pm_solver", "solve_fixed_w"):
        traj = pm_solver.solve_fixed_w(
            u0, run["w_value"], run["T"], cfg.build_solver(),
            kernels=cfg.build_kernels(), output_times=run["output_times"])
    out = _outdir(args)
    index = []
    for i, state in enumerate(traj):
        name = f"u_{i:04d}.csv"
        pm_solver.snapshot_to_csv(state, os.path.join(out, name))
        index.append({"t": state.t, "u": name})
    manifest = {"schema": "adhesim-run/1", "mode": "fixed_w",
                "w_value": run["w_value"], "outputs": index}
    manifest.update(_base_manifest("simulate", cfg, threads))
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    pm_solver.diagnostics_to_json(traj, os.path.join(out, "diagnostics.json"))
    last = traj[-1]
    _say(args, f"final mass = {_show(last.u.mass())}  sup u = {_show(last.u.values.max())}")
    _say(args, f"wrote {len(traj)} snapshots to {out}")
    return 0


def _cmd_picard(args, threads):
    cfg, u0 = _prepare_common(args, need_kernels=True)
    if cfg.w_mode != "coupled":
        raise ValidationError("run.w_mode", "picard requires 'coupled'")
    run = cfg.doc["run"]
    with _phase("coupled", "run_global_picard"):
        result = coupled.run_global_picard(
            u0, cfg.coupled_config(u0),
            tol=run["picard_tol"], max_outer=run["picard_max_outer"])
    code = _finish_coupled(args, cfg, result, "picard", threads)
    factors = result.manifest.get("contraction_factors", [])
    _say(args, f"outer iterations = {result.manifest.get('outer_iterations')}"
               f"  contraction factors = {[float(f'{x:.3g}') for x in factors]}")
    return code


def _binding_inputs(cfg, u0):
    kern = cfg.build_kernels()
    solver = cfg.build_solver()
    if solver.mollifier_eps > 0:
        u0 = pm_solver.mollify(u0, solver.mollifier_eps)
    mu = coupled._field_measure(u0)
    nodes = binding.NodeSet(u0.grid, kern.rho)
    return kern, mu, nodes


def _cmd_binding_solve(args, threads):
    cfg, u0 = _prepare_common(args, need_kernels=True)
    kern, mu, nodes = _binding_inputs(cfg, u0)
    tol = cfg.doc["run"]["binding_tol"]
    with _phase("binding", "solve_binding_picard"):
        res = binding.solve_binding_picard(
            kern, mu, binding.BindingField.constant(nodes, 0.5), 0.0,
            tol=tol, max_iter=2000, strict=True)
    out = _outdir(args)
    _w_to_csv(res.w, os.path.join(out, "w.csv"))
    doc = {"iterations": res.iterations, "final_residual": res.final_residual,
           "converged": res.converged, "n_nodes": nodes.n, "t": 0.0}
    doc.update(_base_manifest("binding-solve", cfg, threads))
    with open(os.path.join(out, "binding.json"), "w") as f:
        json.dump(doc, f, indent=1)
    _say(args, f"converged in {res.iterations} iterations, "
               f"residual = {_show(res.final_residual)}")
    origin = nodes.origin_node()
    if origin is not None:
        _say(args, f"w(0) = {_show(res.w.values[origin])}")
    return 0


def _cmd_certificate(args, threads):
    cfg, u0 = _prepare_common(args, need_kernels=True)
    kern, mu, nodes = _binding_inputs(cfg, u0)
    tol = min(cfg.doc["run"]["binding_tol"], 1e-11)
    with _phase("binding", "solve_binding_picard"):
        res = binding.solve_binding_picard(
            kern, mu, binding.BindingField.constant(nodes, 0.5), 0.0,
            tol=tol, max_iter=2000, strict=True)
    with _phase("binding", "certificate"):
        cert = binding.certificate(mu, res.w, kern, 0.0,
                                   probe_seed=cfg.doc["seed"])
    out = _outdir(args)
    cert.to_json(os.path.join(out, "certificate.json"))
    for name in ("r1", "r2", "lip_mu", "c6", "xinv_norm"):
        _say(args, f"{name} = {_show(getattr(cert, name))}")
    return 0


def _resolve_measure(token):
    """A path on disk wins; otherwise try the bundled example measures."""
    if os.path.exists(token):
        return token
    name = token if token.endswith(".json") else token + ".json"
    ref = importlib.resources.files("adhesim").joinpath("data", name)
    if ref.is_file():
        return str(ref)
    raise ParseError(f"measure {token!r}: no such file or bundled measure")


def _cmd_kr(args, threads):
    with _phase("cli_io", "parse_config"):
        path_a = _resolve_measure(args.measure_a)
        path_b = _resolve_measure(args.measure_b)
        mu_a = measures.measure_from_json(path_a)
        mu_b = measures.measure_from_json(path_b)
    with _phase("measures", "kr_distance"):
        dist = measures.kr_distance(mu_a, mu_b)
    out = _outdir(args)
    doc = {"distance": dist, "a": path_a, "b": path_b,
           "mass_a": mu_a.total_mass(), "mass_b": mu_b.total_mass(),
           "command": "kr", "threads": threads}
    with open(os.path.join(out, "kr.json"), "w") as f:
        json.dump(doc, f, indent=1)
    _say(args, _show(dist))
    return 0


def _cmd_oracle(args, threads):
    cfg, u0 = _prepare_common(args, need_kernels=args.case == "point-mass")
    out = _outdir(args)

    if args.case == "point-mass":
        kern = cfg.build_kernels()
        m = cfg.declared_mass(u0)
        with _phase("binding", "point_mass_solution"):
            sol = binding.point_mass_solution(kern, m, 0.0)
            nodes = binding.NodeSet(u0.grid, kern.rho)
            profile = sol.w_profile(nodes.positions)
        rows = np.column_stack([nodes.positions, profile])
        header = ",".join(f"x{k}" for k in range(cfg.d)) + ",w0"
        _write_rows_csv(os.path.join(out, "oracle.csv"), header, rows)
        scalars = {"case": "point-mass", "m": m,
                   "gamma_plus": sol.gamma_plus, "gamma_minus": sol.gamma_minus,
                   "w_at_origin": sol.w_at_origin}
        table = [("gamma_plus", sol.gamma_plus), ("gamma_minus", sol.gamma_minus),
                 ("w_at_origin", sol.w_at_origin)]
    else:
        if cfg.doc["initial"]["kind"] != "zkb":
            raise ValidationError("initial.kind",
                                  "oracle --case zkb requires initial.kind 'zkb'")
        init = cfg.doc["initial"]
        t_eval = init["t0"] + cfg.doc["run"]["T"]
        with _phase("analysis", "zkb_solution"):
            grid = cfg.build_grid()
            C = analysis.zkb_constant_for_mass(init["mass"], grid.d)
            vals = analysis.zkb_solution(t_eval, grid.cell_centers(), C, grid.d)
            radius = analysis.zkb_support_radius(t_eval, C, grid.d)
        state = pm_solver.State(t_eval, measures.GridField(grid, vals))
        pm_solver.snapshot_to_csv(state, os.path.join(out, "oracle.csv"))
        alpha, beta, k = analysis.zkb_alpha_beta_k(grid.d)
        scalars = {"case": "zkb", "t": t_eval, "C_mass": C,
                   "support_radius": radius, "alpha": alpha, "beta": beta, "k": k}
        table = [("t", t_eval), ("C_mass", C), ("support_radius", radius)]

    scalars.update({"command": "oracle", "threads": threads})
    with open(os.path.join(out, "oracle.json"), "w") as f:
        json.dump(scalars, f, indent=1)
    _say(args, "quantity,value")
    for name, value in table:
        _say(args, f"{name},{_show(value)}")
    return 0


def _cmd_convergence(args, threads):
    cfg, _ = _prepare_common(args)
    doc = cfg.doc
    if doc["initial"]["kind"] != "zkb":
        raise ValidationError("initial.kind",
                              "convergence study requires initial.kind 'zkb'")
    if doc["solver"]["epsilon"] != 0:
        raise ValidationError("solver.epsilon",
                              "must be 0 for the zkb convergence study")
    if doc["solver"]["mollifier_eps"] != 0:
        raise ValidationError("solver.mollifier_eps",
                              "must be 0 for the zkb convergence study")
    if doc["run"]["w_mode"] != "fixed" or doc["run"].get("w_value", 0.0) != 0:
        raise ValidationError("run.w_mode",
                              "convergence study runs the pure porous-medium "
                              "solver (w_mode 'fixed', w_value 0)")

    try:
        levels = sorted(int(tok) for tok in args.levels.split(","))
    except ValueError:
        raise ValidationError("--levels", "expected comma-separated integers")
    if not levels or levels[0] < 2:
        raise ValidationError("--levels", "grid denominators must be >= 2")

    init, run_sec, grid_sec = doc["initial"], doc["run"], doc["grid"]
    d = grid_sec["d"]
    C = analysis.zkb_constant_for_mass(init["mass"], d)
    t_end = init["t0"] + run_sec["T"]
    chi = pm_solver.ChiFunction(doc["solver"]["chi"]["kind"], doc["solver"]["chi"]["c"])

    rows = []
    with _phase("pm_solver", "solve_fixed_w"):
        for n in levels:
            h = 1.0 / n
            grid = measures.Grid.centered(grid_sec["radius"], h, d)
            centers = grid.cell_centers()
            u0 = measures.GridField(grid, analysis.zkb_solution(init["t0"], centers, C, d))
            solver = pm_solver.SolverConfig(
                h=h, domain_radius=grid_sec["radius"], chi=chi,
                epsilon=0.0, cfl_safety=doc["solver"]["cfl_safety"])
            final = pm_solver.solve_fixed_w(u0, 0.0, run_sec["T"], solver)[-1]
            exact = analysis.zkb_solution(t_end, centers, C, d)
            err = float(np.abs(final.u.values - exact).sum() * h**d)
            rows.append((h, err))
            _say(args, f"h = 1/{n}  L1 error = {_show(err)}")

    order = float(np.polyfit(np.log([r[0] for r in rows]),
                             np.log([r[1] for r in rows]), 1)[0])
    out = _outdir(args)
    _write_rows_csv(os.path.join(out, "convergence.csv"), "h,l1_error", rows)
    doc_out = {"levels": levels, "errors": [r[1] for r in rows],
               "fitted_order": order, "t0": init["t0"], "T": run_sec["T"]}
    doc_out.update(_base_manifest("convergence", cfg, threads))
    with open(os.path.join(out, "convergence.json"), "w") as f:
        json.dump(doc_out, f, indent=1)
    _say(args, f"fitted L1 order: {_show(order)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


_HANDLERS = {
    "simulate": _cmd_simulate,
    "picard": _cmd_picard,
    "binding-solve": _cmd_binding_solve,
    "certificate": _cmd_certificate,
    "kr": _cmd_kr,
    "oracle": _cmd_oracle,
    "convergence": _cmd_convergence,
}


def _add_common(p, need_config=True):
    p.add_argument("--config", required=need_config,
                   help="path to a JSON config (schema adhesim-config/1)")
    p.add_argument("--out", default="out", help="output directory (created)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry by dot-path, e.g. run.T=0.001")
    p.add_argument("--quiet", action="store_true", help="suppress stdout")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="adhesim",
        description="Finite-volume simulator for nonlocal adhesion with "
                    "receptor-binding dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("simulate", help="march u (coupled or fixed w)"))
    _add_common(sub.add_parser("picard", help="global Picard validation run"))
    _add_common(sub.add_parser("binding-solve", help="solve the binding equation at t=0"))
    _add_common(sub.add_parser("certificate", help="assemble the contraction certificate"))

    kr = sub.add_parser("kr", help="transport distance between two measures")
    kr.add_argument("measure_a", help="measure JSON path or bundled name")
    kr.add_argument("measure_b", help="measure JSON path or bundled name")
    _add_common(kr, need_config=False)

    oracle = sub.add_parser("oracle", help="closed-form reference tables")
    oracle.add_argument("--case", choices=("point-mass", "zkb"), required=True)
    _add_common(oracle)

    conv = sub.add_parser("convergence", help="self-similar refinement study")
    conv.add_argument("--levels", default="64,128,256",
                      help="comma-separated grid denominators (h = 1/n)")
    _add_common(conv)

    return parser


def _report_error(exc, code):
    module, operation = getattr(exc, "_adhesim_phase", ("cli_io", "run"))
    t = getattr(exc, "t", None)
    stamp = _show(t) if t is not None else "-"
    print(f"adhesim error [{module}.{operation}] t={stamp}: "
          f"{type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def run(argv=None):
    """Entry point; returns the process exit code."""
    args = _build_parser().parse_args(argv)
    try:
        threads = _apply_thread_cap()
        return _HANDLERS[args.command](args, threads)
    except (ParseError, ValidationError) as exc:
        return _report_error(exc, 2)
    except (AdmissibilityError, DomainError, MassMismatch, EmptyMeasure,
            DegenerateState, CFLViolation, BoundBreach, NegativityBreach) as exc:
        return _report_error(exc, 3)
    except CertificateBreach as exc:
        return _report_error(exc, 4)
    except (NonConvergence, SingularX, SingularPreconditioner) as exc:
        return _report_error(exc, 5)
    except (ValueError, OSError) as exc:
        return _report_error(exc, 2)
    except AdhesimError as exc:
        return _report_error(exc, 3)
    except Exception as exc:  # pragma: no cover - last resort
        return _report_error(exc, 1)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
