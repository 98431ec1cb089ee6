"""Discrete measures, grid fields, and the Kantorovich-Rubinstein distance.

A DiscreteMeasure is a finite signed atom list on a closed ball. A GridField is
a nonnegative density sampled at the cell centers of a uniform Cartesian grid;
the two are identified through field_to_measure (one atom per nonzero cell,
weight u_i * h^d).

kr_distance is the Wasserstein-1 / KR distance between equal-mass measures:
exact CDF integral in d=1, exact transportation LP in d>=2.
"""

import csv
import json

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import DomainError, MassMismatch

# Hard cap on source x sink pairs in the transportation LP; above it the
# operands are agglomerated by mass-conserving 2x lattice merging.
LP_PAIR_CAP = 5000 * 5000

_REL_TOL = 1e-12


class Grid:
    """Uniform Cartesian cell grid. Cell centers at lo + (index + 1/2) * h."""

    def __init__(self, lo, h, shape):
        self.lo = np.asarray(lo, dtype=float)
        self.h = float(h)
        self.shape = tuple(int(n) for n in shape)
        if self.lo.shape != (len(self.shape),):
            raise ValueError("lo and shape dimension mismatch")

    @classmethod
    def centered(cls, radius, h, d):
        """Grid covering [-radius, radius]^d with an odd cell count per axis,
        so the origin is exactly a cell center."""
        n = 2 * int(np.ceil(radius / h - 0.5)) + 1
        lo = np.full(d, -0.5 * n * h)
        return cls(lo, h, (n,) * d)

    @property
    def d(self):
        return len(self.shape)

    @property
    def half_width(self):
        return 0.5 * self.h * max(self.shape)

    def axis_centers(self, k):
        return self.lo[k] + (np.arange(self.shape[k]) + 0.5) * self.h

    def cell_centers(self):
        """Array of shape (*grid.shape, d) with the center coordinates."""
        axes = [self.axis_centers(k) for k in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def index_of(self, x, tol=1e-9):
        """Cell index whose center matches x, or None if x is off-center."""
        x = np.asarray(x, dtype=float)
        fidx = (x - self.lo) / self.h - 0.5
        idx = np.rint(fidx).astype(int)
        if np.any(np.abs(fidx - idx) > tol / self.h):
            return None
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            return None
        return tuple(idx)

    def same_geometry(self, other, tol=1e-12):
        return (
            self.shape == other.shape
            and abs(self.h - other.h) <= tol
            and np.all(np.abs(self.lo - other.lo) <= tol)
        )


class GridField:
    """Nonnegative density on a Grid. values has the grid's shape."""

    def __init__(self, grid, values, validate=True):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {grid.shape}")
        if validate and self.values.size and np.min(self.values) < -1e-13:
            raise ValueError(f"negative density {np.min(self.values)}")

    @property
    def h(self):
        return self.grid.h

    @property
    def d(self):
        return self.grid.d

    def mass(self):
        return float(self.values.sum()) * self.grid.h**self.grid.d

    def sup(self):
        return float(self.values.max()) if self.values.size else 0.0

    def l1_distance(self, other):
        return float(np.abs(self.values - other.values).sum()) * self.grid.h**self.grid.d

    def copy(self):
        return GridField(self.grid, self.values.copy(), validate=False)


class VectorField:
    """d-component vector field on a Grid; components stacked on axis 0."""

    def __init__(self, grid, components):
        self.grid = grid
        self.components = np.asarray(components, dtype=float)
        if self.components.shape != (grid.d,) + grid.shape:
            raise ValueError("component array shape mismatch")

    def sup(self):
        """Max Euclidean magnitude over cells."""
        if self.components.size == 0:
            return 0.0
        return float(np.sqrt((self.components**2).sum(axis=0)).max())


class DiscreteMeasure:
    """Finite signed measure: atoms at positions (n, d) with real weights (n,)."""

    def __init__(self, positions, weights, domain_radius, validate=True):
        self.positions = np.atleast_2d(np.asarray(positions, dtype=float))
        self.weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if self.positions.shape[0] == 0:
            self.positions = self.positions.reshape(0, max(1, self.positions.shape[-1]))
        self.domain_radius = float(domain_radius)
        if self.positions.shape[0] != self.weights.shape[0]:
            raise ValueError("positions and weights length mismatch")
        if validate and self.positions.size:
            r = np.sqrt((self.positions**2).sum(axis=1)).max()
            if r > self.domain_radius * (1 + 1e-9) + 1e-12:
                raise DomainError(
                    f"atom at radius {r} outside hosting ball of radius {self.domain_radius}"
                )

    @property
    def d(self):
        return self.positions.shape[1]

    @property
    def n_atoms(self):
        return self.weights.shape[0]

    def total_mass(self):
        """Signed total (not the total variation)."""
        return float(self.weights.sum())

    def is_nonnegative(self, tol=0.0):
        return self.n_atoms == 0 or float(self.weights.min()) >= -tol

    def scaled(self, factor):
        return DiscreteMeasure(self.positions, self.weights * factor, self.domain_radius,
                               validate=False)

    def support_radius(self):
        live = np.abs(self.weights) > 0
        if not live.any():
            return 0.0
        return float(np.sqrt((self.positions[live] ** 2).sum(axis=1)).max())


def _merged_atoms(positions, weights, merge_tol):
    """Sum weights of coincident atoms. merge_tol > 0 snaps positions to a
    lattice of that spacing first; 0 merges exact duplicates only."""
    if positions.shape[0] == 0:
        return positions, weights
    key = positions if merge_tol <= 0 else np.round(positions / merge_tol) * merge_tol
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    w = np.zeros(uniq.shape[0])
    np.add.at(w, inverse, weights)
    if merge_tol <= 0:
        pos = uniq
    else:
        # mass-weighted centroid where possible, plain mean for canceling groups
        pos = np.zeros_like(uniq)
        absw = np.zeros(uniq.shape[0])
        np.add.at(pos, inverse, positions * np.abs(weights)[:, None])
        np.add.at(absw, inverse, np.abs(weights))
        cnt = np.bincount(inverse, minlength=uniq.shape[0]).astype(float)
        mean = np.zeros_like(uniq)
        np.add.at(mean, inverse, positions)
        mean /= cnt[:, None]
        use = absw > 0
        pos[use] = pos[use] / absw[use, None]
        pos[~use] = mean[~use]
    return pos, w


def total_variation(mu, merge_tol=0.0):
    """Sum of |weights| after merging coincident atoms.

    merge_tol: absolute coincidence tolerance; grid-facing callers pass
    grid.h / 100 (of the finest configured grid).
    """
    _, w = _merged_atoms(mu.positions, mu.weights, merge_tol)
    return float(np.abs(w).sum())


def field_to_measure(u, domain_radius=None):
    """One atom per nonzero cell at the cell center, weight u_i * h^d."""
    centers = u.grid.cell_centers().reshape(-1, u.grid.d)
    vals = u.values.reshape(-1)
    live = vals != 0.0
    weights = vals[live] * u.grid.h**u.grid.d
    positions = centers[live]
    if domain_radius is None:
        domain_radius = u.grid.half_width * np.sqrt(u.grid.d) + u.grid.h
    return DiscreteMeasure(positions, weights, domain_radius, validate=False)


def _difference_atoms(mu1, mu2, merge_tol):
    pos = np.vstack([mu1.positions, mu2.positions]) if mu2.n_atoms or mu1.n_atoms else mu1.positions
    w = np.concatenate([mu1.weights, -mu2.weights])
    pos, w = _merged_atoms(pos, w, merge_tol)
    live = w != 0.0
    return pos[live], w[live]


def _check_kr_preconditions(mu1, mu2, merge_tol):
    tv1 = total_variation(mu1, merge_tol)
    tv2 = total_variation(mu2, merge_tol)
    scale = max(tv1, tv2, 1e-300)
    balanced_nonneg = (
        mu1.is_nonnegative(tol=1e-15 * scale)
        and mu2.is_nonnegative(tol=1e-15 * scale)
        and abs(tv1 - tv2) <= _REL_TOL * scale
    )
    zero_mass_diff = abs(mu1.total_mass() - mu2.total_mass()) <= _REL_TOL * scale
    if not (balanced_nonneg or zero_mass_diff):
        raise MassMismatch(
            f"kr_distance needs equal-mass nonnegative measures or a zero-mass "
            f"difference; got TV {tv1} vs {tv2}, signed totals "
            f"{mu1.total_mass()} vs {mu2.total_mass()}"
        )


def _kr_cdf_1d(pos, w):
    """Exact integral of |CDF of the signed difference| for atomic measures."""
    x = pos[:, 0]
    order = np.argsort(x, kind="stable")
    x = x[order]
    cum = np.cumsum(w[order])
    if len(x) < 2:
        return 0.0
    gaps = np.diff(x)
    return float(np.abs(cum[:-1]) @ gaps)


def _agglomerate_to_cap(pos, w, cap_atoms):
    """Mass-conserving lattice merge, doubling the lattice spacing per level."""
    if pos.shape[0] <= cap_atoms:
        return pos, w
    span = pos.max(axis=0) - pos.min(axis=0)
    spacing = max(span.max() / max(pos.shape[0], 2), 1e-12)
    while pos.shape[0] > cap_atoms:
        spacing *= 2.0
        pos, w = _merged_atoms(pos, w, spacing)
        live = w != 0.0
        pos, w = pos[live], w[live]
    return pos, w


def _kr_lp(pos, w):
    """Exact transportation LP between positive and negative parts."""
    src = w > 0
    snk = w < 0
    if not src.any() or not snk.any():
        return 0.0
    cap = int(np.sqrt(LP_PAIR_CAP))
    ps, ws = _agglomerate_to_cap(pos[src], w[src], cap)
    pt, wt = _agglomerate_to_cap(pos[snk], -w[snk], cap)
    ns, nt = ps.shape[0], pt.shape[0]
    cost = np.sqrt(((ps[:, None, :] - pt[None, :, :]) ** 2).sum(axis=2))
    # transportation constraints: row sums = supplies, column sums = demands;
    # one redundant row dropped to keep the system full rank
    rows = []
    cols = []
    for i in range(ns):
        rows.append(np.full(nt, i))
        cols.append(np.arange(nt) + i * nt)
    for j in range(nt - 1):
        rows.append(np.full(ns, ns + j))
        cols.append(j + nt * np.arange(ns))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    a_eq = sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(ns + nt - 1, ns * nt)
    )
    b_eq = np.concatenate([ws, wt[:-1]])
    res = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"transportation LP did not reach optimality: {res.message}")
    return float(res.fun)


def kr_distance(mu1, mu2, merge_tol=0.0, method="auto"):
    """Kantorovich-Rubinstein (Wasserstein-1) distance.

    d=1 uses the exact CDF-difference integral; d>=2 (or method="lp") solves
    the discrete transportation problem between the positive and negative parts
    of mu1 - mu2 with Euclidean cost, to LP optimality.

    Raises MassMismatch unless both measures are nonnegative with equal total
    variation (1e-12 relative) or their difference has zero total mass.
    """
    if mu1.d != mu2.d:
        raise DomainError(f"dimension mismatch {mu1.d} vs {mu2.d}")
    _check_kr_preconditions(mu1, mu2, merge_tol)
    pos, w = _difference_atoms(mu1, mu2, merge_tol)
    if pos.shape[0] == 0:
        return 0.0
    if method == "auto":
        method = "cdf" if mu1.d == 1 else "lp"
    if method == "cdf":
        if mu1.d != 1:
            raise DomainError("CDF formula only applies in d=1")
        return _kr_cdf_1d(pos, w)
    if method == "lp":
        return _kr_lp(pos, w)
    raise ValueError(f"unknown method {method!r}")


def kr_upper_bound(mu1, mu2, merge_tol=0.0):
    """Cheap transport bound: half the joint support diameter times TV of the
    difference. Always >= kr_distance; used to short-circuit monitors."""
    pos, w = _difference_atoms(mu1, mu2, merge_tol)
    if pos.shape[0] == 0:
        return 0.0
    diam = 0.0
    for k in range(pos.shape[1]):
        diam = max(diam, float(pos[:, k].max() - pos[:, k].min()))
    diam *= np.sqrt(pos.shape[1])
    return 0.5 * diam * float(np.abs(w).sum())


def measure_to_json(mu, path=None):
    """Serialize as {"d", "domain_radius", "atoms": [[x..., w], ...]}."""
    doc = {
        "d": mu.d,
        "domain_radius": mu.domain_radius,
        "atoms": [[*map(float, p), float(w)] for p, w in zip(mu.positions, mu.weights)],
    }
    if path is not None:
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
    return doc


def measure_from_json(doc_or_path):
    if isinstance(doc_or_path, (str, bytes)) or hasattr(doc_or_path, "read_text"):
        with open(doc_or_path) as f:
            doc = json.load(f)
    else:
        doc = doc_or_path
    atoms = doc.get("atoms", [])
    d = int(doc["d"])
    if atoms:
        arr = np.asarray(atoms, dtype=float)
        positions, weights = arr[:, :d], arr[:, d]
    else:
        positions, weights = np.zeros((0, d)), np.zeros(0)
    return DiscreteMeasure(positions, weights, float(doc["domain_radius"]))


def cdf_to_csv(mu, path, precision=17):
    """d=1 only: write the piecewise-constant CDF as (x, F(x^+)) rows."""
    if mu.d != 1:
        raise DomainError("CDF export is defined for d=1 measures")
    order = np.argsort(mu.positions[:, 0], kind="stable")
    x = mu.positions[order, 0]
    cum = np.cumsum(mu.weights[order])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "cdf"])
        for xi, ci in zip(x, cum):
            writer.writerow([f"{xi:.{precision}g}", f"{ci:.{precision}g}"])
