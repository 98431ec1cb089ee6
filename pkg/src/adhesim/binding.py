"""The receptor-binding operator Y, its solvers, and the well-posedness
certificate.

The bound-receptor fraction w on the closed ball B_rho solves the fixed-point
equation w = Y(mu, w) with

    Y(mu, w)(x) = psi( G+((1-w)mu)(x), G-(w mu)(x) ),   psi(a,b) = a/(a+b),

where (G s)(x) = int G(x,y) ds(y) integrates an atomic measure against the
binding kernels. Two solvers are provided: damped Picard iteration, and the
preconditioned map w <- w - X^{-1}(w - Y(mu,w)) with X = I - dY/dw frozen at
an anchor pair (mu0, w0), which contracts with factor <= 1/2 inside the
certified neighbourhood. The certificate assembles the contraction radii

    Cw0  = 1/2 min{min w0, 1 - max w0}
    r1   = min{(1 + 2 c6)^{-1}, Cw0}            (w-ball, W^{1,inf} proxy)
    r2   = 1/2 c6^{-1} r1 |mu0| / (1 + |grad w0|_inf)   (mu-ball, KR norm)
    lip  = 1/2 c6 |mu0|^{-1} (1 + |grad w0|_inf + r1)

with c6 = |X^{-1}| * c_kernel, all norms realised on the node lattice as
max(sup, forward-difference sup).

Damping note: for symmetric kernels G+ == G- the operator is affine,
Y = 1 - A w with A row-stochastic-like (A 1 = 1), so undamped Picard has a
-1 eigenvalue direction and oscillates with period 2; the default relaxation
theta = 1/2 turns that mode into a one-step kill.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import DomainError, EmptyMeasure, NonConvergence, SingularPreconditioner, SingularX
from .measures import GridField

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 500
DEFAULT_RELAX = 0.5
_N_KERNEL_PROBES = 32


class NodeSet:
    """Cell centers of a grid lying inside the closed ball of radius rho."""

    def __init__(self, grid, rho):
        self.grid = grid
        self.rho = float(rho)
        centers = grid.cell_centers().reshape(-1, grid.d)
        r = np.sqrt((centers**2).sum(axis=1))
        mask = r <= self.rho * (1 + 1e-12)
        self.flat_ids = np.nonzero(mask)[0]
        if len(self.flat_ids) == 0:
            raise DomainError(f"no grid nodes inside the ball of radius {rho}")
        self.positions = centers[mask]
        self.n = len(self.flat_ids)
        self._node_of_flat = np.full(centers.shape[0], -1, dtype=int)
        self._node_of_flat[self.flat_ids] = np.arange(self.n)
        idx_nd = np.stack(np.unravel_index(self.flat_ids, grid.shape), axis=1)
        pi, pj = [], []
        for k in range(grid.d):
            nb = idx_nd.copy()
            nb[:, k] += 1
            ok = nb[:, k] < grid.shape[k]
            nb_flat = np.ravel_multi_index(tuple(nb[ok].T), grid.shape)
            nb_node = self._node_of_flat[nb_flat]
            live = nb_node >= 0
            pi.append(np.arange(self.n)[ok][live])
            pj.append(nb_node[live])
        self.pair_i = np.concatenate(pi) if pi else np.zeros(0, dtype=int)
        self.pair_j = np.concatenate(pj) if pj else np.zeros(0, dtype=int)

    @property
    def h(self):
        return self.grid.h

    def origin_node(self):
        """Node id of the cell containing the origin, or None."""
        idx = self.grid.index_of(np.zeros(self.grid.d), tol=self.grid.h)
        if idx is None:
            return None
        node = self._node_of_flat[np.ravel_multi_index(idx, self.grid.shape)]
        return int(node) if node >= 0 else None

    def nodes_of_positions(self, positions):
        """Node id for each position (cell-center atoms resolve exactly;
        off-lattice points snap to the nearest contained node)."""
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        r = np.sqrt((positions**2).sum(axis=1))
        if r.size and r.max() > self.rho * (1 + 1e-9) + 1e-12:
            raise DomainError(
                f"measure support radius {r.max()} escapes the ball of radius {self.rho}"
            )
        fidx = np.rint((positions - self.grid.lo) / self.grid.h - 0.5).astype(int)
        fidx = np.clip(fidx, 0, np.array(self.grid.shape) - 1)
        flat = np.ravel_multi_index(tuple(fidx.T), self.grid.shape)
        ids = self._node_of_flat[flat]
        for k in np.nonzero(ids < 0)[0]:
            # boundary cell whose center fell just outside the ball
            d2 = ((self.positions - positions[k]) ** 2).sum(axis=1)
            ids[k] = int(np.argmin(d2))
        return ids

    def grad_sup(self, values):
        if len(self.pair_i) == 0:
            return 0.0
        return float(np.abs(values[self.pair_j] - values[self.pair_i]).max()) / self.h

    def diff_matrix(self):
        """Sparse forward-difference matrix (one row per node pair)."""
        m = len(self.pair_i)
        rows = np.repeat(np.arange(m), 2)
        cols = np.stack([self.pair_i, self.pair_j], axis=1).reshape(-1)
        vals = np.tile([-1.0 / self.h, 1.0 / self.h], m)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(m, self.n))


class BindingField:
    """Bound-receptor fraction sampled on a NodeSet; values in [0, 1]."""

    def __init__(self, nodes, values, validate=True):
        self.nodes = nodes
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (nodes.n,):
            raise ValueError("values length does not match node count")
        if validate:
            if self.values.min() < -1e-12 or self.values.max() > 1 + 1e-12:
                raise ValueError(
                    f"binding fraction outside [0,1]: range "
                    f"[{self.values.min()}, {self.values.max()}]"
                )
            self.values = np.clip(self.values, 0.0, 1.0)

    @classmethod
    def constant(cls, nodes, value):
        return cls(nodes, np.full(nodes.n, float(value)))

    @property
    def grad_sup(self):
        return self.nodes.grad_sup(self.values)

    def norm_w(self):
        """Discrete W^{1,inf} proxy: max(sup |w|, forward-difference sup)."""
        return max(float(np.abs(self.values).max()), self.grad_sup)

    def distance_w(self, other):
        d = self.values - other.values
        return max(float(np.abs(d).max()), self.nodes.grad_sup(d))


def _proxy_norm(nodes, values):
    return max(float(np.abs(values).max()), nodes.grad_sup(values))


def psi(a, b):
    """a/(a+b) with the convention psi(0,0) = 1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = a + b
    out = np.divide(a, s, out=np.ones_like(s, dtype=float), where=s > 0)
    if out.ndim == 0:
        return float(out)
    return out


class GCache:
    """Node x node kernel matrices at a frozen time, sliced by atom columns."""

    def __init__(self, kernels, nodes):
        self.kernels = kernels
        self.nodes = nodes
        self._t = None
        self._mats = None

    def full(self, t):
        if self._t is None or t != self._t:
            inter = self.kernels.interaction
            self._mats = (inter.G_matrix("+", t, self.nodes.positions),
                          inter.G_matrix("-", t, self.nodes.positions))
            self._t = t
        return self._mats


def _check_measure(mu, rho):
    if mu.n_atoms == 0 or float(np.abs(mu.weights).sum()) == 0.0:
        raise EmptyMeasure("binding operator needs a measure with |mu| > 0")
    if mu.weights.min() < -1e-15 * float(np.abs(mu.weights).sum()):
        raise DomainError("binding operator needs a nonnegative measure")
    r = mu.support_radius()
    if r > rho * (1 + 1e-9) + 1e-12:
        raise DomainError(
            f"measure support radius {r} escapes the ball of radius {rho}"
        )


def _cross_matrices(kernels, nodes, mu, t, cache=None):
    """(G+, G-) evaluated on nodes x atoms, plus the atom -> node map."""
    atom_nodes = nodes.nodes_of_positions(mu.positions)
    if cache is not None:
        Gp, Gm = cache.full(t)
        return Gp[:, atom_nodes], Gm[:, atom_nodes], atom_nodes
    inter = kernels.interaction
    Gp = inter.G_cross("+", t, nodes.positions, mu.positions)
    Gm = inter.G_cross("-", t, nodes.positions, mu.positions)
    return Gp, Gm, atom_nodes


def _y_state(kernels, nodes, mu, w_values, t, cache=None):
    """a = G+((1-w)mu), b = G-(w mu) on the nodes, with w read at the atoms."""
    Gp, Gm, atom_nodes = _cross_matrices(kernels, nodes, mu, t, cache)
    w_at = w_values[atom_nodes]
    a = Gp @ ((1.0 - w_at) * mu.weights)
    b = Gm @ (w_at * mu.weights)
    return a, b, Gp, Gm, atom_nodes


def apply_Y(kernels, mu, w, t, cache=None):
    """One application of the binding operator; returns a BindingField."""
    _check_measure(mu, kernels.rho)
    nodes = w.nodes
    a, b, _, _, _ = _y_state(kernels, nodes, mu, w.values, t, cache)
    return BindingField(nodes, psi(a, b), validate=False)


def dY_dw_matrix(kernels, mu, w, t, cache=None):
    """Partial derivative of Y in w: dense (n_nodes x n_atoms) matrix with
    entry (i,j) = -[b_i G+(x_i,y_j) + a_i G-(x_i,y_j)] m_j / (a_i+b_i)^2.
    Invariant under mu -> lambda mu (the scalings cancel)."""
    _check_measure(mu, kernels.rho)
    nodes = w.nodes
    a, b, Gp, Gm, _ = _y_state(kernels, nodes, mu, w.values, t, cache)
    denom = (a + b) ** 2
    return -(b[:, None] * Gp + a[:, None] * Gm) * mu.weights[None, :] / denom[:, None]


def embed_dY(kernels, mu, w, t, cache=None):
    """dY/dw as a square operator on node vectors: the atom-column matrix
    composed with sampling node values at the atom positions."""
    nodes = w.nodes
    M = dY_dw_matrix(kernels, mu, w, t, cache)
    atom_nodes = nodes.nodes_of_positions(mu.positions)
    out = np.zeros((nodes.n, nodes.n))
    np.add.at(out.T, atom_nodes, M.T)
    return out


class PicardResult(NamedTuple):
    w: BindingField
    iterations: int
    final_residual: float
    converged: bool
    history: list


def _coerce_w(nodes, w_init):
    if isinstance(w_init, BindingField):
        return w_init.values.copy()
    arr = np.asarray(w_init, dtype=float)
    if arr.ndim == 0:
        return np.full(nodes.n, float(arr))
    return arr.copy()


def solve_binding_picard(kernels, mu, w_init, t, tol=DEFAULT_TOL,
                         max_iter=DEFAULT_MAX_ITER, relax=DEFAULT_RELAX,
                         strict=False, cache=None):
    """Damped Picard iteration w <- (1-theta) w + theta Y(mu, w).

    Stops when the residual |w - Y(mu,w)| in the combined sup + grad_sup
    norm drops to tol; an already-converged w_init returns in 0 iterations.
    strict=True raises NonConvergence (carrying the last iterate and the
    residual history) instead of returning converged=False.
    """
    _check_measure(mu, kernels.rho)
    if not isinstance(w_init, BindingField):
        raise TypeError("w_init must be a BindingField (it carries the nodes)")
    nodes = w_init.nodes
    w = _coerce_w(nodes, w_init)
    history = []
    iterations = 0
    for k in range(max_iter + 1):
        a, b, _, _, _ = _y_state(kernels, nodes, mu, w, t, cache)
        y = psi(a, b)
        res = _proxy_norm(nodes, w - y)
        history.append(res)
        if res <= tol:
            out = BindingField(nodes, np.clip(w, 0.0, 1.0), validate=False)
            return PicardResult(out, iterations, res, True, history)
        if k == max_iter:
            break
        w = (1.0 - relax) * w + relax * y
        iterations += 1
    out = BindingField(nodes, np.clip(w, 0.0, 1.0), validate=False)
    if strict:
        err = NonConvergence(
            f"Picard did not reach tol={tol} in {max_iter} iterations "
            f"(residual {history[-1]:.3e})", last=out, history=history)
        raise err
    return PicardResult(out, iterations, history[-1], False, history)


def build_preconditioner(kernels, mu0, w_anchor, t, cache=None):
    """X^{-1} for X = I - dY/dw embedded at the anchor pair."""
    X = np.eye(w_anchor.nodes.n) - embed_dY(kernels, mu0, w_anchor, t, cache)
    try:
        cond = np.linalg.cond(X, 1)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularPreconditioner(
                f"anchor operator X is numerically singular (cond ~ {cond:.3e})")
        return np.linalg.inv(X)
    except np.linalg.LinAlgError as exc:
        raise SingularPreconditioner(f"factorization of X failed: {exc}") from exc


class PreconditionedResult(NamedTuple):
    w: BindingField
    iterations: int
    contraction_estimate: float
    final_residual: float
    converged: bool
    history: list


def solve_binding_preconditioned(kernels, mu, w_anchor, xinv, t,
                                 tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                                 strict=False, cache=None):
    """Preconditioned fixed-point iteration w <- w - X^{-1}(w - Y(mu, w)),
    started from the anchor. Reports the empirical contraction factor
    max_k |dw_{k+1}| / |dw_k| (<= 1/2 expected inside the certified ball)."""
    _check_measure(mu, kernels.rho)
    xinv = np.asarray(xinv, dtype=float)
    if not np.all(np.isfinite(xinv)):
        raise SingularPreconditioner("preconditioner contains non-finite entries")
    nodes = w_anchor.nodes
    w = _coerce_w(nodes, w_anchor)
    history = []
    steps = []
    iterations = 0
    contraction = 0.0
    for k in range(max_iter + 1):
        a, b, _, _, _ = _y_state(kernels, nodes, mu, w, t, cache)
        r = w - psi(a, b)
        res = _proxy_norm(nodes, r)
        history.append(res)
        if res <= tol:
            out = BindingField(nodes, np.clip(w, 0.0, 1.0), validate=False)
            return PreconditionedResult(out, iterations, contraction, res, True,
                                        history)
        if k == max_iter:
            break
        delta = -(xinv @ r)
        steps.append(_proxy_norm(nodes, delta))
        if len(steps) >= 2 and steps[-2] > 0:
            contraction = max(contraction, steps[-1] / steps[-2])
        w = w + delta
        iterations += 1
    out = BindingField(nodes, np.clip(w, 0.0, 1.0), validate=False)
    if strict:
        raise NonConvergence(
            f"preconditioned iteration did not reach tol={tol} in {max_iter} "
            f"iterations (residual {history[-1]:.3e})", last=out, history=history)
    return PreconditionedResult(out, iterations, contraction, history[-1], False,
                                history)


@dataclass(frozen=True)
class PointMassSolution:
    """Closed-form anchor for mu0 = m delta_0:
    w0 = sqrt(g-) G+(.,0) / (sqrt(g-) G+(.,0) + sqrt(g+) G-(.,0))."""

    m: float
    gamma_plus: float
    gamma_minus: float
    w_profile: Callable

    @property
    def w_at_origin(self):
        sp, sm = np.sqrt(self.gamma_plus), np.sqrt(self.gamma_minus)
        return float(sp / (sp + sm))


def point_mass_solution(kernels, m, t):
    if m <= 0:
        raise ValueError("point mass m must be positive")
    inter = kernels.interaction
    origin = np.zeros((1, kernels.d))
    gamma_p = float(inter.K_plus(t, origin)[0])
    gamma_m = float(inter.K_minus(t, origin)[0])
    sp, sm = np.sqrt(gamma_p), np.sqrt(gamma_m)

    def w_profile(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        zeros = np.zeros_like(x)
        Gp = inter.G_cross("+", t, x, zeros[:1]).reshape(-1)
        Gm = inter.G_cross("-", t, x, zeros[:1]).reshape(-1)
        return sm * Gp / (sm * Gp + sp * Gm)

    return PointMassSolution(float(m), gamma_p, gamma_m, w_profile)


@dataclass
class Certificate:
    r1: float
    r2: float
    lip_mu: float
    c6: float
    xinv_norm: float
    provenance: dict = field(default_factory=dict)

    def to_json(self, path=None):
        doc = {"r1": self.r1, "r2": self.r2, "lip_mu": self.lip_mu,
               "c6": self.c6, "xinv_norm": self.xinv_norm,
               "provenance": self.provenance}
        if path is not None:
            with open(path, "w") as f:
                json.dump(doc, f, indent=1)
        return doc

    @classmethod
    def from_json(cls, doc_or_path):
        if isinstance(doc_or_path, (str, bytes)) or hasattr(doc_or_path, "read_text"):
            with open(doc_or_path) as f:
                doc = json.load(f)
        else:
            doc = dict(doc_or_path)
        return cls(doc["r1"], doc["r2"], doc["lip_mu"], doc["c6"],
                   doc["xinv_norm"], doc.get("provenance", {}))


def _xinv_proxy_norm(xinv, nodes):
    """Operator norm of X^{-1} on the discrete W^{1,inf} proxy space.

    The input ball is {h : |h|_inf <= 1, |Dh|_inf <= 1}, not the plain sup
    ball; measuring inputs in sup norm alone would let them wiggle at the
    grid scale and inflate the norm by O(1/h). Estimated by alternating
    ascent: evaluate the augmented matrix [X^{-1}; D X^{-1}] at the current
    input, pick the worst output row, re-solve the row LP over the ball
    (HiGHS), repeat. The best observed value (a true lower bound) gets a
    1.5x safety factor, capped by the rigorous splitting bound
    1 + max(|S|_inf, |DS|_inf) for S = X^{-1} - I.
    """
    n = xinv.shape[0]
    D = nodes.diff_matrix()
    if hasattr(D, "toarray"):
        D = D.toarray()
    S = xinv - np.eye(n)
    cap = 1.0 + max(float(np.abs(S).sum(axis=1).max()),
                    float(np.abs(D @ S).sum(axis=1).max()))
    A = np.vstack([xinv, D @ xinv])
    A_ub = np.vstack([D, -D])
    b_ub = np.ones(A_ub.shape[0])
    best = 0.0
    h = np.ones(n)
    seen = set()
    for _ in range(8):
        v = A @ h
        best = max(best, float(np.abs(v).max()))
        i = int(np.abs(v).argmax())
        key = (i, float(np.sign(v[i])))
        if key in seen:
            break
        seen.add(key)
        res = linprog(-np.sign(v[i]) * A[i], A_ub=A_ub, b_ub=b_ub,
                      bounds=(-1.0, 1.0), method="highs")
        if not res.success:
            break
        h = res.x
    if best == 0.0:
        return cap
    return float(min(1.5 * best, cap))


def certificate(mu0, w0, kernels, t, cache=None, n_probes=_N_KERNEL_PROBES,
                probe_seed=0):
    """Assemble the contraction certificate at an anchor pair (mu0, w0).

    xinv_norm estimates the W^{1,inf}-proxy operator norm of X^{-1}
    (inputs and outputs both measured as max(sup, forward-difference sup)),
    via LP-based alternating ascent capped by a rigorous splitting bound;
    see _xinv_proxy_norm. c_kernel is a probe estimate (random directions,
    1.5x safety) of the w-derivative bound the theory leaves implicit.
    """
    _check_measure(mu0, kernels.rho)
    nodes = w0.nodes
    res_anchor = w0.distance_w(apply_Y(kernels, mu0, w0, t, cache))
    if res_anchor > 1e-8:
        raise ValueError(
            f"anchor does not solve the binding equation (residual {res_anchor:.3e})"
        )
    M_emb = embed_dY(kernels, mu0, w0, t, cache)
    X = np.eye(nodes.n) - M_emb
    try:
        cond = float(np.linalg.cond(X, 1))
    except np.linalg.LinAlgError as exc:
        raise SingularX(f"condition estimate for X failed: {exc}") from exc
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularX(f"X is numerically singular (cond ~ {cond:.3e})")
    xinv = np.linalg.inv(X)
    xinv_norm = _xinv_proxy_norm(xinv, nodes)

    rng = np.random.default_rng(probe_seed)
    ratio = 0.0
    for _ in range(n_probes):
        hvec = rng.uniform(-1.0, 1.0, size=nodes.n)
        val = M_emb @ hvec
        ratio = max(ratio, _proxy_norm(nodes, val) / float(np.abs(hvec).max()))
    c_kernel = 1.5 * ratio

    c6 = xinv_norm * c_kernel
    cw0 = 0.5 * min(float(w0.values.min()), 1.0 - float(w0.values.max()))
    if cw0 <= 0:
        raise ValueError("anchor w0 touches 0 or 1; no interior ball exists")
    r1 = min(1.0 / (1.0 + 2.0 * c6), cw0)
    mu_mass = float(np.abs(mu0.weights).sum())
    grad_w0 = w0.grad_sup
    r2 = 0.5 * r1 * mu_mass / (c6 * (1.0 + grad_w0))
    lip_mu = 0.5 * c6 * (1.0 + grad_w0 + r1) / mu_mass
    prov = {
        "grid_spacing": nodes.h,
        "rho": kernels.rho,
        "n_nodes": int(nodes.n),
        "n_atoms": int(mu0.n_atoms),
        "t": float(t),
        "anchor_residual": float(res_anchor),
        "cond_X": cond,
        "c_kernel": float(c_kernel),
        "c_kernel_probes": int(n_probes),
        "probe_seed": int(probe_seed),
        "mu0_mass": mu_mass,
        "grad_w0_sup": float(grad_w0),
    }
    return Certificate(float(r1), float(r2), float(lip_mu), float(c6),
                       float(xinv_norm), prov)


def extend_w(w, target_grid):
    """Extend w from the ball to a grid on R^d by metric projection:
    w_ext(x) = w(Pi(x)) with Pi the projection onto the ball, sampled
    multilinearly on the node lattice. The projection radius is inset by
    sqrt(d) h so every interpolation stencil has all its corners inside the
    ball (an O(h) perturbation of the true projection); this keeps the
    extension's difference quotients <= sqrt(d) * grad_sup(w) everywhere,
    exactly grad_sup(w) in d=1. Values stay in [0, 1]."""
    nodes = w.nodes
    src = nodes.grid
    d = src.d
    r_safe = nodes.rho - np.sqrt(d) * src.h
    if r_safe <= 0.5 * nodes.rho:
        r_safe = 0.5 * nodes.rho  # degenerate resolution; stay well inside
    targets = target_grid.cell_centers().reshape(-1, target_grid.d)
    r = np.sqrt((targets**2).sum(axis=1))
    scale = np.minimum(1.0, r_safe / np.maximum(r, 1e-300))
    proj = targets * scale[:, None]

    fpos = (proj - src.lo) / src.h - 0.5
    base = np.floor(fpos).astype(int)
    frac = fpos - base
    vals = np.zeros(len(proj))
    wsum = np.zeros(len(proj))
    for corner in range(2**d):
        offs = np.array([(corner >> k) & 1 for k in range(d)])
        idx = base + offs[None, :]
        weight = np.prod(np.where(offs[None, :] == 1, frac, 1.0 - frac), axis=1)
        inb = np.all((idx >= 0) & (idx < np.array(src.shape)), axis=1)
        node = np.full(len(proj), -1, dtype=int)
        node[inb] = nodes._node_of_flat[
            np.ravel_multi_index(tuple(idx[inb].T), src.shape)]
        live = node >= 0
        vals[live] += weight[live] * w.values[node[live]]
        wsum[live] += weight[live]
    missing = wsum <= 0
    if missing.any():
        # deep-outside queries whose projection cell has no nodes at all
        for k in np.nonzero(missing)[0]:
            d2 = ((nodes.positions - proj[k]) ** 2).sum(axis=1)
            j = int(np.argmin(d2))
            vals[k] = w.values[j]
            wsum[k] = 1.0
    out = (vals / wsum).reshape(target_grid.shape)
    return GridField(target_grid, np.clip(out, 0.0, 1.0), validate=False)
