"""Simplified D-vine copula models: PIT and simulation recursions (plus their
parameter-derivative variants), data-driven order selection, and sequential
fitting of the mirrored knockoff vine."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.stats import kendalltau

from .bicop import (
    EPS,
    INDEPENDENCE,
    BivariateCopula,
    CopulaFamily,
    default_candidates,
    select_family,
)
from .exceptions import DataError, DomainError, NumericError
from .pcvine import build_H, corr_to_pcorr, knockoff_s_vector, nearest_corr

_PDF_FLOOR = 1e-300


@dataclass(frozen=True)
class DVineModel:
    """A D-vine copula on the path 1 - 2 - ... - d.

    ``pair_copulas[t-1][e]`` holds the copula of the pair (e+1, e+1+t) given
    the in-between variables, for tree t = 1..d-1 and edge e = 0..d-1-t.
    ``order`` records which original variable sits at each path position; the
    recursions below always work in path coordinates.
    """

    d: int
    pair_copulas: list
    order: np.ndarray | None = None

    def __post_init__(self):
        if self.d < 2:
            raise DomainError("a D-vine needs at least two variables")
        if len(self.pair_copulas) != self.d - 1:
            raise DomainError(f"expected {self.d - 1} trees, got {len(self.pair_copulas)}")
        total = 0
        for t, tree in enumerate(self.pair_copulas, start=1):
            if len(tree) != self.d - t:
                raise DomainError(f"tree {t} must have {self.d - t} edges, got {len(tree)}")
            total += len(tree)
        assert total == self.d * (self.d - 1) // 2
        if self.order is not None:
            o = np.asarray(self.order)
            if sorted(o.tolist()) != list(range(len(o))):
                raise DomainError("order must be a permutation of 0..d-1")

    def copula(self, j: int, i: int) -> BivariateCopula:
        """Pair copula C_{j,i; j+1:i-1} for 1 <= j < i <= d (1-based)."""
        return self.pair_copulas[i - j - 1][j - 1]

    def with_copula(self, j: int, i: int, cop: BivariateCopula) -> "DVineModel":
        """New model with the copula at position (j, i) replaced.

        Only that position changes; if the old object was shared with a
        mirror edge, the mirror keeps the old copula.
        """
        trees = [list(tree) for tree in self.pair_copulas]
        trees[i - j - 1][j - 1] = cop
        return DVineModel(self.d, trees, self.order)

    def parametric_edges(self, tree_range=None) -> list[tuple[int, int]]:
        """(j, i) labels of edges carrying a parameter, optionally filtered
        to trees within [tree_range[0], tree_range[1]]."""
        out = []
        for t, tree in enumerate(self.pair_copulas, start=1):
            if tree_range is not None and not tree_range[0] <= t <= tree_range[1]:
                continue
            for e, cop in enumerate(tree):
                if cop.n_params > 0:
                    out.append((e + 1, e + 1 + t))
        return out

    def to_dict(self) -> dict:
        recs = []
        for t, tree in enumerate(self.pair_copulas, start=1):
            for e, cop in enumerate(tree):
                recs.append({"tree": t, "edge": e, **cop.to_dict()})
        order = None if self.order is None else [int(v) for v in self.order]
        return {"d": self.d, "order": order, "pair_copulas": recs}

    @staticmethod
    def from_dict(rec: dict) -> "DVineModel":
        d = int(rec["d"])
        trees = [[INDEPENDENCE] * (d - t) for t in range(1, d)]
        for item in rec["pair_copulas"]:
            trees[item["tree"] - 1][item["edge"]] = BivariateCopula.from_dict(item)
        order = None if rec.get("order") is None else np.asarray(rec["order"], dtype=int)
        return DVineModel(d, trees, order)


def all_gaussian_dvine(corr, order=None) -> DVineModel:
    """D-vine with Gaussian pair copulas parametrized by the partial
    correlations of ``corr`` (independence where a partial is exactly zero)."""
    p = corr_to_pcorr(corr)
    d = p.shape[0]
    trees = []
    for t in range(1, d):
        tree = []
        for e in range(d - t):
            rho = float(p[e, e + t])
            if rho == 0.0:
                tree.append(INDEPENDENCE)
            else:
                tree.append(BivariateCopula(CopulaFamily.GAUSSIAN, 0, rho))
        trees.append(tree)
    return DVineModel(d, trees, order)


def _as_unit_matrix(u, d_max):
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[1] > d_max:
        raise DomainError(f"data has {u.shape[1]} columns but the model has {d_max}")
    return np.clip(u, EPS, 1.0 - EPS)


def compute_pits(model: DVineModel, u) -> np.ndarray:
    """Rosenblatt transform W_i = F(u_i | u_1..u_{i-1}) under the vine.

    ``u`` may have fewer columns than the model dimension; the leading
    sub-vine of a D-vine is itself a D-vine, so the transform of a prefix is
    exact.
    """
    u = _as_unit_matrix(u, model.d)
    n, k = u.shape
    w = np.empty_like(u)
    w[:, 0] = u[:, 0]
    a = [None] * (k + 1)
    b = [None] * (k + 1)
    a[1] = b[1] = u[:, 0]
    for i in range(2, k + 1):
        a[i] = u[:, i - 1]
        for j in range(i - 1, 0, -1):
            a[j] = model.copula(j, i).hfunc1(b[j], a[j + 1])
        w[:, i - 1] = a[1]
        b[i] = a[i]
        for j in range(1, i):
            b[j] = model.copula(j, i).hfunc2(b[j], a[j + 1])
    return w


def simulate(model: DVineModel, w) -> np.ndarray:
    """Inverse Rosenblatt transform: map uniforms ``w`` to a vine sample."""
    w = _as_unit_matrix(w, model.d)
    n, d = w.shape
    if d != model.d:
        raise DomainError("simulate needs the full model dimension")
    u = np.empty_like(w)
    u[:, 0] = w[:, 0]
    a = [None] * (d + 1)
    b = [None] * (d + 1)
    a[1] = b[1] = w[:, 0]
    for i in range(2, d + 1):
        a[1] = w[:, i - 1]
        for j in range(1, i):
            a[j + 1] = model.copula(j, i).hinv1(b[j], a[j])
        u[:, i - 1] = a[i]
        b[i] = a[i]
        for j in range(1, i):
            b[j] = model.copula(j, i).hfunc2(b[j], a[j + 1])
    return u


def compute_pits_with_deriv(model: DVineModel, u, target: tuple[int, int]):
    """PITs together with their derivative w.r.t. the parameter of one edge.

    ``target`` is the (j, i) label of a pair copula (1-based, j < i).  The
    theta-derivative term fires only on that edge; an independence target
    yields a zero derivative.
    """
    _check_target(model, target)
    u = _as_unit_matrix(u, model.d)
    n, k = u.shape
    w = np.empty_like(u)
    wc = np.zeros_like(u)
    w[:, 0] = u[:, 0]
    a = [None] * (k + 1)
    b = [None] * (k + 1)
    ac = [None] * (k + 1)
    bc = [None] * (k + 1)
    a[1] = b[1] = u[:, 0]
    ac[1] = bc[1] = np.zeros(n)
    for i in range(2, k + 1):
        a[i] = u[:, i - 1]
        ac[i] = np.zeros(n)
        for j in range(i - 1, 0, -1):
            der = model.copula(j, i).derivatives(b[j], a[j + 1])
            d_th = der.d_theta_hfunc1 if (j, i) == target else 0.0
            ac[j] = d_th + bc[j] * der.d_u1_hfunc1 + ac[j + 1] * der.d_u2_hfunc1
            a[j] = der.hfunc1
        w[:, i - 1] = a[1]
        wc[:, i - 1] = ac[1]
        b[i] = a[i]
        bc[i] = ac[i]
        for j in range(1, i):
            der = model.copula(j, i).derivatives(b[j], a[j + 1])
            d_th = der.d_theta_hfunc2 if (j, i) == target else 0.0
            bc[j] = d_th + bc[j] * der.pdf + ac[j + 1] * der.d_u2_hfunc2
            b[j] = der.hfunc2
    return w, wc


def simulate_with_deriv(model: DVineModel, w, w_deriv, target: tuple[int, int]):
    """Simulation pass propagating d/d theta_{target} through the inversions.

    The inverse step uses the implicit-function terms d_theta = -dd_theta/f,
    d_1 = -dd_1/f and d_2 = 1/f applied to the incoming derivative of the
    inverted value (chain rule through v = hinv1(b, a)).
    """
    _check_target(model, target)
    w = _as_unit_matrix(w, model.d)
    wc_in = np.atleast_2d(np.asarray(w_deriv, dtype=float))
    if wc_in.shape != w.shape:
        raise DomainError("w_deriv must match the shape of w")
    n, d = w.shape
    if d != model.d:
        raise DomainError("simulate needs the full model dimension")
    u = np.empty_like(w)
    uc = np.zeros_like(w)
    u[:, 0] = w[:, 0]
    uc[:, 0] = wc_in[:, 0]
    a = [None] * (d + 1)
    b = [None] * (d + 1)
    ac = [None] * (d + 1)
    bc = [None] * (d + 1)
    a[1] = b[1] = w[:, 0]
    ac[1] = bc[1] = wc_in[:, 0]
    for i in range(2, d + 1):
        a[1] = w[:, i - 1]
        ac[1] = wc_in[:, i - 1]
        for j in range(1, i):
            cop = model.copula(j, i)
            a[j + 1] = cop.hinv1(b[j], a[j])
            der = cop.derivatives(b[j], a[j + 1])
            f = der.pdf
            if np.any(f < _PDF_FLOOR):
                raise NumericError(f"pair density underflow on edge ({j}, {i})")
            d_th = -der.d_theta_hfunc1 / f if (j, i) == target else 0.0
            ac[j + 1] = d_th + bc[j] * (-der.d_u1_hfunc1 / f) + ac[j] / f
        u[:, i - 1] = a[i]
        uc[:, i - 1] = ac[i]
        b[i] = a[i]
        bc[i] = ac[i]
        for j in range(1, i):
            der = model.copula(j, i).derivatives(b[j], a[j + 1])
            d_th = der.d_theta_hfunc2 if (j, i) == target else 0.0
            bc[j] = d_th + bc[j] * der.pdf + ac[j + 1] * der.d_u2_hfunc2
            b[j] = der.hfunc2
    return u, uc


def _check_target(model, target):
    j, i = target
    if not (1 <= j < i <= model.d):
        raise DomainError(f"edge {target} does not exist in a {model.d}-dim D-vine")


# ---------------------------------------------------------------------------
# Kendall tau matrix and order selection
# ---------------------------------------------------------------------------

def kendall_tau_matrix(x) -> np.ndarray:
    """Pairwise Kendall's tau (exact O(n log n) per pair)."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n < 10:
        raise DataError("need at least 10 observations for Kendall's tau")
    tau = np.eye(d)
    for a in range(d):
        if np.all(x[:, a] == x[0, a]):
            raise DataError(f"column {a} is constant; Kendall's tau undefined")
    for a in range(d):
        for b in range(a + 1, d):
            t, _ = kendalltau(x[:, a], x[:, b])
            if not np.isfinite(t):
                raise DataError(f"Kendall's tau undefined for columns ({a}, {b})")
            tau[a, b] = tau[b, a] = t
    return tau


def _path_cost(weights, path):
    return float(sum(weights[path[k], path[k + 1]] for k in range(len(path) - 1)))


def _held_karp_path(weights) -> list[int]:
    # exact shortest Hamiltonian path via dynamic programming over subsets
    d = weights.shape[0]
    full = (1 << d) - 1
    cost = {(1 << v, v): 0.0 for v in range(d)}
    parent = {}
    for mask in range(1, full + 1):
        for last in range(d):
            if not mask & (1 << last) or (mask, last) not in cost:
                continue
            base = cost[(mask, last)]
            for nxt in range(d):
                if mask & (1 << nxt):
                    continue
                key = (mask | (1 << nxt), nxt)
                cand = base + weights[last, nxt]
                if cand < cost.get(key, np.inf):
                    cost[key] = cand
                    parent[key] = last
    last = min(range(d), key=lambda v: cost[(full, v)])
    path, mask = [last], full
    while len(path) < d:
        prev = parent[(mask, path[-1])]
        mask ^= 1 << path[-1]
        path.append(prev)
    return path[::-1]


def _nearest_neighbor_2opt(weights) -> list[int]:
    d = weights.shape[0]
    best, best_cost = None, np.inf
    for start in range(d):
        path = [start]
        todo = set(range(d)) - {start}
        while todo:
            nxt = min(sorted(todo), key=lambda v: weights[path[-1], v])
            path.append(nxt)
            todo.remove(nxt)
        cost = _path_cost(weights, path)
        if cost < best_cost:
            best, best_cost = path, cost
    improved = True
    while improved:
        improved = False
        for a in range(d - 1):
            for b in range(a + 1, d):
                # reverse best[a..b]; only the boundary edges change
                delta = 0.0
                if a > 0:
                    delta += weights[best[a - 1], best[b]] - weights[best[a - 1], best[a]]
                if b < d - 1:
                    delta += weights[best[a], best[b + 1]] - weights[best[b], best[b + 1]]
                if delta < -1e-12:
                    best[a:b + 1] = best[a:b + 1][::-1]
                    improved = True
    return best


def select_order(u_data, tau_matrix=None) -> np.ndarray:
    """Variable order maximizing first-tree dependence.

    Shortest Hamiltonian path with weights 1 - |tau|; exact (dynamic
    programming) for d <= 10, nearest-neighbor plus 2-opt beyond.
    Deterministic given the data; the path is canonicalized so that its
    first variable index is smaller than its last.
    """
    tau = kendall_tau_matrix(u_data) if tau_matrix is None else np.asarray(tau_matrix)
    weights = 1.0 - np.abs(tau)
    np.fill_diagonal(weights, 0.0)
    d = weights.shape[0]
    if d == 2:
        return np.array([0, 1])
    path = _held_karp_path(weights) if d <= 10 else _nearest_neighbor_2opt(weights)
    if path[0] > path[-1]:
        path = path[::-1]
    return np.asarray(path, dtype=int)


def brute_force_order(weights) -> tuple[list[int], float]:
    """Exhaustive Hamiltonian-path search; testing oracle, d <= 8."""
    d = weights.shape[0]
    best, best_cost = None, np.inf
    for perm in permutations(range(d)):
        if perm[0] > perm[-1]:
            continue
        cost = _path_cost(weights, list(perm))
        if cost < best_cost:
            best, best_cost = list(perm), cost
    return best, best_cost


# ---------------------------------------------------------------------------
# Sequential fitting of the 2d-dimensional knockoff vine
# ---------------------------------------------------------------------------

def _edge_candidates(families, tau_hat):
    if families is not None:
        return families
    return default_candidates(neg_tau=tau_hat < 0.0)


def fit_knockoff_dvine(u_data, families=None, tau_matrix=None) -> DVineModel:
    """Fit the 2d-dimensional D-vine for (U, U-tilde) from d-dimensional data.

    Trees 1..d-1 are estimated sequentially on the duplicated vector (U, U):
    in each tree only the first d edges are fit (AIC family selection + MLE
    on h-function pseudo-observations); the remaining edges reuse the fitted
    copula objects of their mirror edges.  Trees d..2d-1 receive Gaussian
    copulas with partial correlations taken from the completed knockoff
    matrix H built from the tau-inversion estimate of R.

    ``families`` optionally fixes the candidate set as (family, rotation)
    pairs; by default candidates adapt rotations to the sign of the edge tau.
    """
    u = np.atleast_2d(np.asarray(u_data, dtype=float))
    n, d = u.shape
    if d < 2:
        raise DataError("need at least two variables")
    u = np.clip(u, EPS, 1.0 - EPS)
    if tau_matrix is None:
        tau_matrix = kendall_tau_matrix(u)
    r_hat = nearest_corr(np.sin(np.pi * tau_matrix / 2.0))
    s = knockoff_s_vector(r_hat)
    p_h = corr_to_pcorr(build_H(r_hat, s))

    dd = 2 * d
    u2 = np.hstack([u, u])
    left = [u2[:, e] for e in range(dd - 1)]   # left[e] = F(v_{e+1} | mid)
    right = [u2[:, e + 1] for e in range(dd - 1)]  # right[e] = F(v_{e+1+t} | mid)
    trees = []
    for t in range(1, d):
        n_edges = dd - t
        tree = []
        for e in range(min(d, n_edges)):
            tau_e, _ = kendalltau(left[e], right[e])
            if not np.isfinite(tau_e):
                raise DataError(f"degenerate pseudo-observations on tree {t}, edge {e}")
            pair = np.column_stack([left[e], right[e]])
            try:
                cop = select_family(pair, _edge_candidates(families, tau_e),
                                    empirical_tau=tau_e)
            except (DataError, DomainError) as exc:
                raise DataError(f"tree {t}, edge {e}: {exc}") from exc
            tree.append(cop)
        for e in range(d, n_edges):
            tree.append(tree[e - d])  # mirrored edge shares the copula object
        trees.append(tree)
        if t < d - 1:
            new_left = [trees[-1][e].hfunc2(left[e], right[e]) for e in range(n_edges - 1)]
            new_right = [trees[-1][e + 1].hfunc1(left[e + 1], right[e + 1])
                         for e in range(n_edges - 1)]
            left, right = new_left, new_right
    for t in range(d, dd):
        tree = [BivariateCopula(CopulaFamily.GAUSSIAN, 0, float(p_h[e, e + t]))
                for e in range(dd - t)]
        trees.append(tree)
    return DVineModel(dd, trees)
