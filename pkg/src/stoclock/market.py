"""Exact convex duality for consumption problems on finite event trees.

A finite market is an event tree: each node carries conditional branch
probabilities, a price vector for ``d`` risky assets, a clock increment
``dkappa >= 0`` (with every root-to-leaf path summing to one) and an
endowment density.  Consumption is measured against the clock, so the
agent earns utility ``sum_n P(n) dkappa(n) U(t(n), c(n))`` and finances
consumption by trading: the wealth recursion along an edge ``n -> m`` is

    X(m) = X(n) + H(n) . (S(m) - S(n)) - (c(n) - e(n)) * dkappa(n),

with terminal wealth required to be non-negative.

On a finite tree the set of (scaled) absolutely continuous martingale
measures is a compact convex polytope in the leaf weights, so the dual
problem -- minimize the conjugate functional plus the endowment pairing
over that polytope -- is a smooth finite-dimensional program.  This
module solves both problems, checks them against each other, and bundles
the individual assertions of the duality theorem (value-function shape,
attainment, budget saturation, first-order consumption identity) into a
single verifier.

Node times are their depths: ``t(n) = depth(n)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from . import utility as ut

__all__ = [
    "EventTree",
    "MartingalePolytope",
    "MeasureElement",
    "PrimalSolution",
    "DualSolution",
    "DualityReport",
    "CheckResult",
    "ArbitrageError",
    "InfeasibleProblemError",
    "ConsistencyError",
    "tree_from_json",
    "tree_from_rows",
    "martingale_polytope",
    "hedging_prices",
    "pairing",
    "solve_dual",
    "dual_value",
    "dual_value_prime",
    "solve_primal",
    "verify_duality",
]


class ArbitrageError(RuntimeError):
    """The tree admits no equivalent martingale measure."""


class InfeasibleProblemError(RuntimeError):
    """Initial wealth below the negative lower hedging price of the endowment."""

    def __init__(self, message: str, x: float, lower_price: float, witness_q: np.ndarray):
        super().__init__(message)
        self.x = x
        self.lower_price = lower_price
        self.witness_q = witness_q


class ConsistencyError(RuntimeError):
    """Two independent computations of the same quantity disagree."""


# ---------------------------------------------------------------------------
# Tree container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventTree:
    """Finite event tree with clock increments and endowment densities.

    Arrays are indexed by node id 0..n-1; node 0 is the root, parents
    precede children.  ``prob[i]`` is the conditional probability of
    reaching node ``i`` from its parent (1 for the root).
    """

    parent: np.ndarray          # int, parent[0] = -1
    prob: np.ndarray            # float, conditional branch probabilities
    price: np.ndarray           # float, shape (n_nodes, d)
    dkappa: np.ndarray          # float, >= 0, path sums equal 1
    endow: np.ndarray           # float, >= 0
    children: Tuple[Tuple[int, ...], ...] = dc_field(default=(), compare=False)
    depth: np.ndarray = dc_field(default=None, compare=False)
    path_prob: np.ndarray = dc_field(default=None, compare=False)
    leaves: Tuple[int, ...] = dc_field(default=(), compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def n_assets(self) -> int:
        return self.price.shape[1]

    def times(self) -> np.ndarray:
        """Node times; one unit per tree level."""
        return self.depth.astype(float)

    def path_nodes(self, leaf: int) -> List[int]:
        out = [leaf]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def endowment_payoff(self) -> np.ndarray:
        """Cumulative endowment per leaf: path sum of ``e * dkappa``."""
        acc = np.zeros(self.n_nodes)
        for i in range(self.n_nodes):
            p = self.parent[i]
            acc[i] = (acc[p] if p >= 0 else 0.0) + self.endow[i] * self.dkappa[i]
        return acc[list(self.leaves)]

    def subtree_mass_matrix(self) -> np.ndarray:
        """0/1 matrix A with A[n, j] = 1 iff leaf j descends from node n."""
        leaves = list(self.leaves)
        mat = np.zeros((self.n_nodes, len(leaves)))
        for j, leaf in enumerate(leaves):
            for n in self.path_nodes(leaf):
                mat[n, j] = 1.0
        return mat


def tree_from_rows(rows: Sequence[dict]) -> EventTree:
    """Build a validated tree from ``{id, parent, prob, price, dkappa, endow}`` rows."""
    required = {"id", "parent", "prob", "price", "dkappa", "endow"}
    n = len(rows)
    if n == 0:
        raise ValueError("tree has no nodes")
    by_id = {}
    for idx, row in enumerate(rows):
        extra = set(row) - required
        missing = required - set(row)
        if extra or missing:
            raise ValueError(
                f"node entry {idx}: unknown keys {sorted(extra)}, missing keys {sorted(missing)}"
            )
        by_id[row["id"]] = row
    if len(by_id) != n:
        raise ValueError("duplicate node ids")
    order = sorted(by_id)  # ids must topologically sort parents first
    pos = {node_id: i for i, node_id in enumerate(order)}
    parent = np.empty(n, dtype=int)
    prob = np.empty(n)
    dkappa = np.empty(n)
    endow = np.empty(n)
    d = len(np.atleast_1d(by_id[order[0]]["price"]))
    price = np.empty((n, d))
    roots = 0
    for i, node_id in enumerate(order):
        row = by_id[node_id]
        if row["parent"] is None:
            parent[i] = -1
            roots += 1
        else:
            if row["parent"] not in pos or pos[row["parent"]] >= i:
                raise ValueError(f"node {node_id}: parent {row['parent']} must exist and precede it")
            parent[i] = pos[row["parent"]]
        prob[i] = float(row["prob"])
        dkappa[i] = float(row["dkappa"])
        endow[i] = float(row["endow"])
        pvec = np.atleast_1d(np.asarray(row["price"], dtype=float))
        if len(pvec) != d:
            raise ValueError(f"node {node_id}: price dimension {len(pvec)} != {d}")
        price[i] = pvec
    if roots != 1:
        raise ValueError(f"tree must have exactly one root, found {roots}")
    if np.any(prob <= 0.0):
        raise ValueError("branch probabilities must be strictly positive")
    if np.any(dkappa < 0.0):
        raise ValueError("clock increments must be non-negative")
    if np.any(endow < 0.0):
        raise ValueError("endowment densities must be non-negative")

    children: List[List[int]] = [[] for _ in range(n)]
    for i in range(1, n):
        children[parent[i]].append(i)
    for i, kids in enumerate(children):
        if kids:
            s = prob[kids].sum()
            if abs(s - 1.0) > 1e-12:
                raise ValueError(f"branch probabilities at node {order[i]} sum to {s}, not 1")
    depth = np.zeros(n, dtype=int)
    path_prob = np.ones(n)
    clock_sum = np.zeros(n)
    for i in range(n):
        p = parent[i]
        if p >= 0:
            depth[i] = depth[p] + 1
            path_prob[i] = path_prob[p] * prob[i]
            clock_sum[i] = clock_sum[p] + dkappa[i]
        else:
            clock_sum[i] = dkappa[i]
    leaves = tuple(i for i in range(n) if not children[i])
    for leaf in leaves:
        if abs(clock_sum[leaf] - 1.0) > 1e-12:
            raise ValueError(f"clock path-sum at leaf {order[leaf]} is {clock_sum[leaf]}, not 1")
    return EventTree(
        parent=parent, prob=prob, price=price, dkappa=dkappa, endow=endow,
        children=tuple(tuple(k) for k in children), depth=depth,
        path_prob=path_prob, leaves=leaves,
    )


def tree_from_json(source) -> Tuple[EventTree, Optional[ut.UtilityField]]:
    """Load ``{"nodes": [...], "utility": {...}}`` from a path, file or dict."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source.read() if hasattr(source, "read") else open(source).read()
        doc = json.loads(text)  # json.JSONDecodeError carries line/column
    unknown = set(doc) - {"nodes", "utility"}
    if unknown:
        raise ValueError(f"unknown top-level keys in tree file: {sorted(unknown)}")
    if "nodes" not in doc:
        raise ValueError("tree file is missing the 'nodes' array")
    tree = tree_from_rows(doc["nodes"])
    fld = None
    if "utility" in doc:
        u = dict(doc["utility"])
        unknown = set(u) - {"family", "gamma", "beta"}
        if unknown:
            raise ValueError(f"unknown utility keys: {sorted(unknown)}")
        fld = ut.UtilityField(
            family=u.get("family", "log"),
            gamma=float(u.get("gamma", 0.0)),
            beta=float(u.get("beta", 0.0)),
        )
    return tree, fld


# ---------------------------------------------------------------------------
# Martingale polytope
# ---------------------------------------------------------------------------


@dataclass
class MartingalePolytope:
    """Leaf-weight description ``{q : A q = b, q >= 0}`` of the martingale measures.

    ``mart`` is the homogeneous block (martingale conditions only); ``A``
    stacks ``mart`` with the normalization row.  ``vertices`` is the exact
    vertex list (rows), present when the tree has at most
    ``VERTEX_ENUM_MAX_LEAVES`` leaves.
    """

    A: np.ndarray
    b: np.ndarray
    mart: np.ndarray
    vertices: Optional[np.ndarray]
    leaf_ids: Tuple[int, ...]

    def contains(self, q: np.ndarray, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= -tol) and np.max(np.abs(self.A @ q - self.b)) <= tol)


VERTEX_ENUM_MAX_LEAVES = 12


def _martingale_rows(tree: EventTree) -> np.ndarray:
    """One homogeneous row per (non-terminal node, asset)."""
    leaves = list(tree.leaves)
    leaf_pos = {leaf: j for j, leaf in enumerate(leaves)}
    desc: List[List[int]] = [[] for _ in range(tree.n_nodes)]
    for leaf in leaves:
        for n in tree.path_nodes(leaf):
            desc[n].append(leaf)
    rows = []
    for n in range(tree.n_nodes):
        if not tree.children[n]:
            continue
        for a in range(tree.n_assets):
            row = np.zeros(len(leaves))
            for child in tree.children[n]:
                delta = tree.price[child, a] - tree.price[n, a]
                for leaf in desc[child]:
                    row[leaf_pos[leaf]] = delta
            rows.append(row)
    return np.array(rows) if rows else np.zeros((0, len(leaves)))


def _rational_solve(a_rows: List[List[Fraction]], rhs: List[Fraction]) -> Optional[List[Fraction]]:
    """Exact Gaussian elimination; None if the system is singular/inconsistent."""
    m = len(a_rows)
    if m == 0:
        return []
    n = len(a_rows[0])
    aug = [row[:] + [rhs[i]] for i, row in enumerate(a_rows)]
    row = 0
    pivots = []
    for col in range(n):
        piv = next((r for r in range(row, m) if aug[r][col] != 0), None)
        if piv is None:
            continue
        aug[row], aug[piv] = aug[piv], aug[row]
        pv = aug[row][col]
        aug[row] = [v / pv for v in aug[row]]
        for r in range(m):
            if r != row and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [vr - f * vp for vr, vp in zip(aug[r], aug[row])]
        pivots.append(col)
        row += 1
        if row == m:
            break
    for r in range(row, m):
        if aug[r][n] != 0:
            return None  # inconsistent
    if len(pivots) < n:
        return None  # underdetermined for this column choice
    sol = [Fraction(0)] * n
    for r, col in enumerate(pivots):
        sol[col] = aug[r][n]
    return sol


def _enumerate_vertices(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact basic-feasible-solution enumeration of ``{q : A q = b, q >= 0}``."""
    m, L = A.shape
    A_f = [[Fraction(x).limit_denominator(10**12) for x in row] for row in A]
    b_f = [Fraction(x).limit_denominator(10**12) for x in b]
    rank = np.linalg.matrix_rank(A)
    found = {}
    for support in itertools.combinations(range(L), int(rank)):
        sub = [[A_f[i][j] for j in support] for i in range(m)]
        sol = _rational_solve(sub, b_f)
        if sol is None or any(v < 0 for v in sol):
            continue
        q = [Fraction(0)] * L
        for j, col in enumerate(support):
            q[col] = sol[j]
        found[tuple(q)] = None
    return np.array([[float(v) for v in q] for q in found]) if found else np.zeros((0, L))


def martingale_polytope(tree: EventTree) -> MartingalePolytope:
    """Constraint system (and exact vertices, on small trees) of the measure set.

    Raises :class:`ArbitrageError` when the polytope is empty or contains
    no strictly positive element, i.e. when no equivalent martingale
    measure exists.
    """
    mart = _martingale_rows(tree)
    L = len(tree.leaves)
    A = np.vstack([mart, np.ones((1, L))])
    b = np.concatenate([np.zeros(len(mart)), [1.0]])
    vertices = _enumerate_vertices(A, b) if L <= VERTEX_ENUM_MAX_LEAVES else None
    if vertices is not None and len(vertices) == 0:
        raise ArbitrageError("martingale measure polytope is empty: the tree admits arbitrage")
    # Strict positivity: maximize the floor of q over the polytope.
    c = np.zeros(L + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-np.eye(L), np.ones((L, 1))])
    res = optimize.linprog(
        c, A_ub=A_ub, b_ub=np.zeros(L),
        A_eq=np.hstack([A, np.zeros((len(b), 1))]), b_eq=b,
        bounds=[(0, None)] * L + [(0, 1)], method="highs",
    )
    if not res.success:
        raise ArbitrageError("martingale measure polytope is empty: the tree admits arbitrage")
    if res.x[-1] <= 1e-12:
        raise ArbitrageError(
            "no equivalent martingale measure: every measure in the polytope has a null branch"
        )
    return MartingalePolytope(A=A, b=b, mart=mart, vertices=vertices, leaf_ids=tree.leaves)


def hedging_prices(tree: EventTree, poly: Optional[MartingalePolytope] = None) -> Tuple[float, float]:
    """Lower and upper hedging prices of the cumulative endowment.

    ``(min, max)`` of the expected endowment payoff over the martingale
    polytope; computed from the exact vertices when available,否 by
    linear programming.
    """
    poly = poly if poly is not None else martingale_polytope(tree)
    payoff = tree.endowment_payoff()
    if poly.vertices is not None:
        vals = poly.vertices @ payoff
        return float(vals.min()), float(vals.max())
    lo = optimize.linprog(payoff, A_eq=poly.A, b_eq=poly.b,
                          bounds=[(0, None)] * len(payoff), method="highs")
    hi = optimize.linprog(-payoff, A_eq=poly.A, b_eq=poly.b,
                          bounds=[(0, None)] * len(payoff), method="highs")
    if not (lo.success and hi.success):
        raise ArbitrageError("hedging price LP infeasible")
    return float(lo.fun), float(-hi.fun)


def _argmin_vertex(tree: EventTree, poly: MartingalePolytope) -> np.ndarray:
    payoff = tree.endowment_payoff()
    if poly.vertices is not None:
        return poly.vertices[int(np.argmin(poly.vertices @ payoff))]
    res = optimize.linprog(payoff, A_eq=poly.A, b_eq=poly.b,
                           bounds=[(0, None)] * len(payoff), method="highs")
    return res.x


# ---------------------------------------------------------------------------
# Measures and the pairing
# ---------------------------------------------------------------------------


@dataclass
class MeasureElement:
    """A scaled absolutely continuous martingale measure.

    ``q`` are the terminal-node weights (summing to one), ``xi`` in [0, 1]
    the scale, and ``Y[n] = xi * y * mass(n) / P(n)`` the node-wise density
    of the scaled measure against the physical one.
    """

    xi: float
    y: float
    q: np.ndarray
    Y: np.ndarray

    @classmethod
    def from_leaf_weights(cls, tree: EventTree, q: np.ndarray, xi: float = 1.0,
                          y: float = 1.0) -> "MeasureElement":
        mass = tree.subtree_mass_matrix() @ np.asarray(q, dtype=float)
        Y = xi * y * mass / tree.path_prob
        return cls(xi=float(xi), y=float(y), q=np.asarray(q, dtype=float), Y=Y)


def pairing(tree: EventTree, c: np.ndarray, measure: MeasureElement) -> float:
    """Value of consumption under a scaled measure, computed two ways.

    The direct sum over (node, measure weight) and the density-weighted
    physical sum are evaluated independently and must agree to 1e-12
    relative; their common value is returned.
    """
    c = np.asarray(c, dtype=float)
    mass = tree.subtree_mass_matrix() @ measure.q
    direct = measure.xi * measure.y * float(np.sum(mass * c * tree.dkappa))
    weighted = float(np.sum(tree.path_prob * measure.Y * c * tree.dkappa))
    scale = max(1.0, abs(direct))
    if abs(direct - weighted) > 1e-12 * scale:
        raise ConsistencyError(
            f"pairing mismatch: direct={direct!r} density-weighted={weighted!r}"
        )
    return direct


# ---------------------------------------------------------------------------
# Dual problem
# ---------------------------------------------------------------------------


@dataclass
class DualSolution:
    y: float
    measure: MeasureElement
    value: float
    kkt_residual: float
    w: np.ndarray  # xi * q, the raw optimization variable


def _conjugate_terms(tree: EventTree, fld) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices, clock weights and times of nodes that carry conjugate value."""
    idx = np.nonzero(tree.dkappa > 0.0)[0]
    times = tree.times()[idx]
    weights = tree.path_prob[idx] * tree.dkappa[idx]
    return idx, weights, times


class _DualObjective:
    """Conjugate functional on the scaled-measure cone, in leaf-mass coordinates."""

    def __init__(self, tree: EventTree, fld, y: float):
        self.tree = tree
        self.fld = fld
        self.y = float(y)
        self.mass_mat = tree.subtree_mass_matrix()
        self.idx, self.weights, self.times = _conjugate_terms(tree, fld)
        self.p_idx = tree.path_prob[self.idx]
        # endowment pairing is linear: sum_n mass(n) e(n) dkappa(n)
        self.endow_leaf = self.mass_mat.T @ (tree.endow * tree.dkappa)
        self.gamma = 0.0 if fld.family == "log" else fld.gamma

    def _node_levels(self, w: np.ndarray) -> np.ndarray:
        mass = self.mass_mat @ w
        return self.y * mass[self.idx] / self.p_idx

    def value(self, w: np.ndarray) -> float:
        lv = np.maximum(self._node_levels(w), 1e-300)
        v = sum(wt * ut.conjugate(self.fld, float(t), float(y_n))
                for wt, t, y_n in zip(self.weights, self.times, lv))
        return float(v + self.y * self.endow_leaf @ w)

    def grad(self, w: np.ndarray) -> np.ndarray:
        lv = np.maximum(self._node_levels(w), 1e-300)
        inv = np.array([ut.inverse_marginal(self.fld, float(t), float(y_n))
                        for t, y_n in zip(self.times, lv)])
        g = np.zeros(len(w))
        contrib = self.tree.dkappa[self.idx] * (-inv)
        for row, cval in zip(self.mass_mat[self.idx], contrib):
            g += row * cval
        return self.y * (g + self.endow_leaf)

    def hess(self, w: np.ndarray) -> np.ndarray:
        lv = np.maximum(self._node_levels(w), 1e-300)
        n = len(w)
        h = np.zeros((n, n))
        for pos, node in enumerate(self.idx):
            y_n = lv[pos]
            i_n = ut.inverse_marginal(self.fld, float(self.times[pos]), float(y_n))
            v2 = i_n / ((1.0 - self.gamma) * y_n)  # V_yy, same formula for log (gamma=0)
            row = self.mass_mat[node]
            coeff = self.tree.dkappa[node] * v2 * self.y**2 / self.p_idx[pos]
            h += coeff * np.outer(row, row)
        return h


def _project_to_affine(M: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """Least-squares projection of w0 onto {M w = 0} (martingale block only)."""
    if len(M) == 0:
        return w0.copy()
    correction, *_ = np.linalg.lstsq(M, M @ w0, rcond=None)
    return w0 - correction


def _newton_polish(obj: _DualObjective, M: np.ndarray, w: np.ndarray,
                   scale_active: bool, iters: int = 60) -> np.ndarray:
    """Equality-constrained Newton refinement on the active manifold."""
    n = len(w)
    rows = [M] if len(M) else []
    if scale_active:
        rows.append(np.ones((1, n)))
    A = np.vstack(rows) if rows else np.zeros((0, n))
    m = len(A)
    for _ in range(iters):
        g = obj.grad(w)
        h = obj.hess(w)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = h + 1e-13 * np.eye(n)
        if m:
            kkt[:n, n:] = A.T
            kkt[n:, :n] = A
        rhs = np.concatenate([-g, (np.ones(m) - A @ w) if False else -(A @ w - (np.r_[np.zeros(len(M)), 1.0][:m] if scale_active else np.zeros(m)))])
        try:
            step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        f0 = obj.value(w)
        while t > 1e-12:
            cand = w + t * step
            if np.all(cand > 0.0) and obj.value(cand) <= f0 + 1e-14 * abs(f0):
                break
            t *= 0.5
        if t <= 1e-12:
            break
        w = w + t * step
        if np.linalg.norm(t * step, ord=np.inf) < 1e-15 * max(1.0, np.linalg.norm(w)):
            break
    return w


def _stationarity_residual(obj: _DualObjective, M: np.ndarray, w: np.ndarray,
                           scale_active: bool) -> float:
    g = obj.grad(w)
    rows = [M] if len(M) else []
    if scale_active:
        rows.append(np.ones((1, len(w))))
    free = w > 1e-11
    if rows:
        A = np.vstack(rows)
        mult, *_ = np.linalg.lstsq(A.T[free], g[free], rcond=None)
        resid = g - A.T @ mult
    else:
        resid = g
    # At an active non-negativity bound the gradient may point outward.
    resid = np.where(free, resid, np.minimum(resid, 0.0))
    return float(np.linalg.norm(resid, ord=np.inf)) / max(1.0, abs(obj.y))


def _canonicalize_flat_mass(tree: EventTree, w: np.ndarray) -> np.ndarray:
    """Fix value-irrelevant mass splits below clock-exhausted nodes.

    Within a subtree whose strict descendants carry neither clock weight
    nor endowment, the objective does not depend on how the subtree mass
    is split, so we pin the split to the conditional physical
    probabilities.  Deterministic representative among optima.
    """
    leaves = list(tree.leaves)
    leaf_pos = {leaf: j for j, leaf in enumerate(leaves)}
    mass_mat = tree.subtree_mass_matrix()
    relevant = (tree.dkappa > 0) | (tree.endow * tree.dkappa > 0)
    w = w.copy()
    for n in range(tree.n_nodes):
        if not tree.children[n]:
            continue
        strict_desc = [m for m in range(tree.n_nodes)
                       if m != n and mass_mat[n][leaf_pos.get(m, 0)] >= 0]
        # descendants of n, excluding n
        desc = [m for m in range(tree.n_nodes) if m != n and _is_descendant(tree, m, n)]
        if desc and not np.any(relevant[desc]):
            sub_leaves = [j for j, leaf in enumerate(leaves) if _is_descendant(tree, leaf, n)]
            total = w[sub_leaves].sum()
            cond = tree.path_prob[[leaves[j] for j in sub_leaves]]
            cond = cond / cond.sum()
            w[sub_leaves] = total * cond
    return w


def _is_descendant(tree: EventTree, node: int, ancestor: int) -> bool:
    while node >= 0:
        if node == ancestor:
            return True
        node = int(tree.parent[node])
    return False


def solve_dual(tree: EventTree, fld, y: float,
               poly: Optional[MartingalePolytope] = None,
               w_start: Optional[np.ndarray] = None) -> DualSolution:
    """Minimize the conjugate functional over scaled martingale measures.

    The feasible set in leaf-mass coordinates ``w = xi * q`` is the
    polytope ``{w >= 0, (martingale rows) w = 0, sum(w) <= 1}``; the
    objective is smooth and convex there, so attainment is automatic.
    Deterministic initialization at the projection of the physical leaf
    probabilities; interior-point solve followed by a Newton polish on
    the active manifold.
    """
    if y < 0.0:
        raise ValueError("dual level must be non-negative; v(y) = +inf for y < 0")
    if y == 0.0:
        raise ValueError("dual level must be strictly positive for a finite solution")
    poly = poly if poly is not None else martingale_polytope(tree)
    obj = _DualObjective(tree, fld, y)
    M = poly.mart
    L = len(tree.leaves)
    if w_start is None:
        w0 = _project_to_affine(M, tree.path_prob[list(tree.leaves)].astype(float))
        if np.any(w0 <= 0.0) or abs(w0.sum()) < 1e-12:
            if poly.vertices is not None and len(poly.vertices):
                w0 = poly.vertices.mean(axis=0)
            else:
                w0 = np.full(L, 1.0 / L)
                w0 = _project_to_affine(M, w0)
        w0 = np.maximum(w0, 1e-9)
        w0 *= min(1.0, 0.999999 / w0.sum()) if w0.sum() > 1.0 else 1.0
    else:
        w0 = np.clip(w_start, 1e-12, None)

    constraints = []
    if len(M):
        constraints.append(optimize.LinearConstraint(M, 0.0, 0.0))
    constraints.append(optimize.LinearConstraint(np.ones((1, L)), 0.0, 1.0))
    res = optimize.minimize(
        obj.value, w0, jac=obj.grad, hess=obj.hess, method="trust-constr",
        bounds=optimize.Bounds(np.zeros(L), np.full(L, np.inf)),
        constraints=constraints,
        options={"gtol": 1e-12, "xtol": 1e-14, "maxiter": 3000, "verbose": 0},
    )
    w = np.maximum(res.x, 0.0)
    scale_active = w.sum() > 1.0 - 1e-7
    w = _newton_polish(obj, M, np.maximum(w, 1e-14), scale_active)
    if scale_active:
        w *= 1.0 / w.sum()
    w = _canonicalize_flat_mass(tree, w)
    xi = float(w.sum())
    q = w / xi if xi > 0 else np.full(L, 1.0 / L)
    measure = MeasureElement.from_leaf_weights(tree, q, xi=xi, y=y)
    resid = _stationarity_residual(obj, M, w, scale_active)
    return DualSolution(y=y, measure=measure, value=obj.value(w),
                        kkt_residual=resid, w=w)


def dual_value(tree: EventTree, fld, y: float,
               poly: Optional[MartingalePolytope] = None) -> float:
    """Dual value function ``v(y)``; ``+inf`` for ``y < 0`` by convention."""
    if y < 0.0:
        return math.inf
    if y == 0.0:
        return math.inf if _utility_unbounded_above(fld) else _sup_utility(tree, fld)
    return solve_dual(tree, fld, y, poly=poly).value


def _utility_unbounded_above(fld) -> bool:
    return fld.family == "log" or fld.gamma > 0.0


def _sup_utility(tree: EventTree, fld) -> float:
    # Only reached for bounded-above fields (power with gamma < 0): sup U = -1/gamma.
    _, weights, _ = _conjugate_terms(tree, fld)
    return float(weights.sum() * (-1.0 / fld.gamma))


def dual_value_prime(tree: EventTree, fld, y: float,
                     poly: Optional[MartingalePolytope] = None,
                     rel_step: float = 1e-4) -> float:
    """Central-difference derivative ``v'(y)`` with step ``rel_step * y``."""
    poly = poly if poly is not None else martingale_polytope(tree)
    h = rel_step * y
    base = solve_dual(tree, fld, y, poly=poly)
    up = solve_dual(tree, fld, y + h, poly=poly, w_start=base.w)
    dn = solve_dual(tree, fld, y - h, poly=poly, w_start=base.w)
    return float((up.value - dn.value) / (2.0 * h))


# ---------------------------------------------------------------------------
# Primal problem
# ---------------------------------------------------------------------------


@dataclass
class PrimalSolution:
    c: np.ndarray               # consumption density per node (0 off the clock support)
    H: np.ndarray               # shape (n_nodes, d); zero rows at leaves
    X: np.ndarray               # wealth before consumption at each node
    value: float                # attained objective (budget-formulation solve)
    value_recursion: float      # value of the direct wealth-recursion solve
    c_direct: np.ndarray        # consumption from the direct solve
    y_star: float
    dual: DualSolution
    budget_residual: float
    kkt_residual: float


def _consumption_from_dual(tree: EventTree, fld, dual: DualSolution) -> np.ndarray:
    c = np.zeros(tree.n_nodes)
    times = tree.times()
    for n in np.nonzero(tree.dkappa > 0.0)[0]:
        y_n = max(dual.measure.Y[n], 1e-300)
        c[n] = ut.inverse_marginal(fld, float(times[n]), float(y_n))
    return c


def _replicate(tree: EventTree, c: np.ndarray, q: np.ndarray
               ) -> Tuple[np.ndarray, np.ndarray, float]:
    """Backward hedge construction for the net consumption claim.

    Returns (X_before_consumption, H, max hedge residual).  ``X[n]`` is
    the wealth needed on arrival at ``n``; conditional measure weights
    come from the supplied leaf weights, with physical weights as a
    fallback on null subtrees.
    """
    leaves = list(tree.leaves)
    mass = tree.subtree_mass_matrix() @ q
    X = np.zeros(tree.n_nodes)
    X_after = np.zeros(tree.n_nodes)
    H = np.zeros((tree.n_nodes, tree.n_assets))
    max_resid = 0.0
    for n in reversed(range(tree.n_nodes)):
        kids = tree.children[n]
        if kids:
            w = np.array([mass[k] for k in kids])
            if w.sum() <= 1e-300:
                w = np.array([tree.prob[k] for k in kids])
            w = w / w.sum()
            X_after[n] = float(w @ X[list(kids)])
            dS = np.array([tree.price[k] - tree.price[n] for k in kids])
            target = X[list(kids)] - X_after[n]
            sol, res, *_ = np.linalg.lstsq(dS, target, rcond=None)
            H[n] = sol
            max_resid = max(max_resid, float(np.max(np.abs(dS @ sol - target), initial=0.0)))
        X[n] = X_after[n] + (c[n] - tree.endow[n]) * tree.dkappa[n]
    return X, H, max_resid


class _RecursionProgram:
    """Direct concave program over (consumption, hedges) in recursion form."""

    def __init__(self, tree: EventTree, fld):
        self.tree = tree
        self.fld = fld
        self.c_nodes = list(np.nonzero(tree.dkappa > 0.0)[0])
        relevant = self._value_relevant()
        self.h_nodes = [n for n in range(tree.n_nodes) if tree.children[n] and relevant[n]]
        self.n_c = len(self.c_nodes)
        self.n_h = len(self.h_nodes)
        self.d = tree.n_assets
        self.times = tree.times()

    def _value_relevant(self) -> np.ndarray:
        """Nodes with clock mass or endowment somewhere strictly below."""
        rel = np.zeros(self.tree.n_nodes, dtype=bool)
        has = (self.tree.dkappa > 0) | (self.tree.endow * self.tree.dkappa > 0)
        for n in reversed(range(self.tree.n_nodes)):
            below = any(has[k] or rel[k] for k in self.tree.children[n])
            rel[n] = below
        return rel

    def split(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        c = z[: self.n_c]
        h = z[self.n_c:].reshape(self.n_h, self.d)
        return c, h

    def wealth(self, z: np.ndarray, x: float) -> np.ndarray:
        """Post-consumption wealth at every node; X_after[leaf] are the constraints."""
        tree = self.tree
        c_full = np.zeros(tree.n_nodes)
        for val, n in zip(z[: self.n_c], self.c_nodes):
            c_full[n] = val
        h_full = np.zeros((tree.n_nodes, self.d))
        for row, n in zip(z[self.n_c:].reshape(self.n_h, self.d), self.h_nodes):
            h_full[n] = row
        X_after = np.zeros(tree.n_nodes)
        for n in range(tree.n_nodes):
            p = tree.parent[n]
            arrive = x if p < 0 else X_after[p] + float(
                h_full[p] @ (tree.price[n] - tree.price[p]))
            X_after[n] = arrive - (c_full[n] - tree.endow[n]) * tree.dkappa[n]
        return X_after

    def objective(self, z: np.ndarray) -> float:
        c = z[: self.n_c]
        total = 0.0
        for val, n in zip(c, self.c_nodes):
            total += self.tree.path_prob[n] * self.tree.dkappa[n] * ut.u_eval(
                self.fld, float(self.times[n]), max(float(val), 1e-300))
        return total

    def objective_grad(self, z: np.ndarray) -> np.ndarray:
        g = np.zeros(len(z))
        for i, n in enumerate(self.c_nodes):
            g[i] = self.tree.path_prob[n] * self.tree.dkappa[n] * ut.u_prime(
                self.fld, float(self.times[n]), max(float(z[i]), 1e-300))
        return g

    def solve(self, x: float, c0_level: float, h0: Optional[np.ndarray] = None
              ) -> Tuple[np.ndarray, float]:
        z0 = np.concatenate([
            np.full(self.n_c, max(c0_level, 1e-6)),
            np.zeros(self.n_h * self.d) if h0 is None else h0.ravel(),
        ])
        leaves = list(self.tree.leaves)

        def leaf_wealth(z: np.ndarray) -> np.ndarray:
            return self.wealth(z, x)[leaves]

        cons = [{"type": "ineq", "fun": leaf_wealth}]
        bounds = [(1e-12, None)] * self.n_c + [(None, None)] * (self.n_h * self.d)
        res = optimize.minimize(
            lambda z: -self.objective(z), z0, jac=lambda z: -self.objective_grad(z),
            method="SLSQP", bounds=bounds, constraints=cons,
            options={"maxiter": 800, "ftol": 1e-14},
        )
        z = res.x
        z = self._polish(z, x)
        return z, self.objective(z)

    def _polish(self, z: np.ndarray, x: float, iters: int = 60) -> np.ndarray:
        """Newton on the saturated system: all leaf wealths pinned at zero.

        Applies only when the incoming point has every terminal wealth
        near its floor, which strict monotonicity guarantees at the
        optimum whenever the minimizing measure charges every leaf.
        """
        leaves = list(self.tree.leaves)
        if np.max(np.abs(self.wealth(z, x)[leaves])) > 1e-3 * max(1.0, abs(x)):
            return z
        n_z = len(z)
        n_l = len(leaves)

        def leaf_jac(zv: np.ndarray) -> np.ndarray:
            jac = np.zeros((n_l, n_z))
            eps = 1e-7
            base = self.wealth(zv, x)[leaves]
            for k in range(n_z):
                zp = zv.copy()
                zp[k] += eps
                jac[:, k] = (self.wealth(zp, x)[leaves] - base) / eps
            return jac

        lam = np.full(n_l, 1.0)
        for _ in range(iters):
            A = leaf_jac(z)  # wealth constraints are affine in z: exact Jacobian
            g = self.objective_grad(z)
            resid_stat = g + A.T @ lam
            resid_feas = self.wealth(z, x)[leaves]
            if max(np.linalg.norm(resid_stat, np.inf),
                   np.linalg.norm(resid_feas, np.inf)) < 1e-13 * max(1.0, abs(x)):
                break
            hdiag = np.zeros(n_z)
            for i, n in enumerate(self.c_nodes):
                w = self.tree.path_prob[n] * self.tree.dkappa[n]
                t = float(self.times[n])
                cval = max(float(z[i]), 1e-300)
                gamma = 0.0 if self.fld.family == "log" else self.fld.gamma
                hdiag[i] = w * (gamma - 1.0) * ut.u_prime(self.fld, t, cval) / cval
            kkt = np.zeros((n_z + n_l, n_z + n_l))
            kkt[:n_z, :n_z] = np.diag(hdiag) - 1e-13 * np.eye(n_z)
            kkt[:n_z, n_z:] = A.T
            kkt[n_z:, :n_z] = A
            rhs = np.concatenate([-(g + A.T @ lam), -resid_feas])
            try:
                step = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            except np.linalg.LinAlgError:
                break
            dz, dlam = step[:n_z], step[n_z:]
            t_step = 1.0
            while t_step > 1e-10 and np.any(z[: self.n_c] + t_step * dz[: self.n_c] <= 0.0):
                t_step *= 0.5
            if t_step <= 1e-10:
                break
            z = z + t_step * dz
            lam = lam + t_step * dlam
        return z

    def kkt_residual(self, z: np.ndarray, x: float) -> float:
        leaves = list(self.tree.leaves)
        A = np.zeros((len(leaves), len(z)))
        eps = 1e-7
        base = self.wealth(z, x)[leaves]
        for k in range(len(z)):
            zp = z.copy()
            zp[k] += eps
            A[:, k] = (self.wealth(zp, x)[leaves] - base) / eps
        g = self.objective_grad(z)
        lam, *_ = np.linalg.lstsq(A.T, -g, rcond=None)
        lam = np.maximum(lam, 0.0)
        stat = np.linalg.norm(g + A.T @ lam, np.inf)
        feas = float(np.max(np.maximum(-base, 0.0), initial=0.0))
        comp = float(np.max(np.abs(lam * base), initial=0.0))
        return max(stat, feas, comp) / max(1.0, abs(x))


def solve_primal(tree: EventTree, fld, x: float,
                 poly: Optional[MartingalePolytope] = None) -> PrimalSolution:
    """Maximize clock-weighted expected utility from initial wealth ``x``.

    Solved twice: through the dual (budget-constraint formulation, exact
    first-order consumption identity), and directly over consumption and
    hedges in wealth-recursion form.  The two values must agree to 1e-6;
    the reported consumption and value come from the dual route, the
    recursion route is attached for inspection.

    Raises :class:`InfeasibleProblemError` when ``x`` lies below the
    negative lower hedging price of the endowment, with the minimizing
    measure as certificate.
    """
    poly = poly if poly is not None else martingale_polytope(tree)
    lower, _ = hedging_prices(tree, poly)
    if x < -lower - 1e-12:
        raise InfeasibleProblemError(
            f"initial wealth {x} is below -{lower} (negative lower hedging price); "
            "no consumption plan is financeable",
            x=x, lower_price=lower, witness_q=_argmin_vertex(tree, poly),
        )

    # Budget-formulation solve via the dual: find y with v'(y) = -x.
    y_star = _match_dual_level(tree, fld, x, poly)
    dual = solve_dual(tree, fld, y_star, poly=poly)
    c = _consumption_from_dual(tree, fld, dual)
    idx, weights, times = _conjugate_terms(tree, fld)
    value = float(sum(w * ut.u_eval(fld, float(t), max(float(c[n]), 1e-300))
                      for w, t, n in zip(weights, times, idx)))
    X, H, hedge_resid = _replicate(tree, c, dual.measure.q)
    budget_residual = abs(X[0] - x)

    prog = _RecursionProgram(tree, fld)
    payoff = tree.endowment_payoff()
    c0 = 0.5 * max(x + float(np.min(payoff, initial=0.0)), 0.1 * abs(x) + 1e-3)
    z_dir, value_dir = prog.solve(x, c0_level=c0)
    c_dir_full = np.zeros(tree.n_nodes)
    for val, n in zip(z_dir[: prog.n_c], prog.c_nodes):
        c_dir_full[n] = val

    if abs(value - value_dir) > 1e-6 * max(1.0, abs(value)):
        raise ConsistencyError(
            f"budget-formulation value {value!r} and wealth-recursion value "
            f"{value_dir!r} differ beyond tolerance"
        )
    kkt = max(dual.kkt_residual, hedge_resid, budget_residual,
              prog.kkt_residual(z_dir, x))
    return PrimalSolution(
        c=c, H=H, X=X, value=value, value_recursion=value_dir, c_direct=c_dir_full,
        y_star=y_star, dual=dual, budget_residual=budget_residual, kkt_residual=kkt,
    )


def _match_dual_level(tree: EventTree, fld, x: float, poly: MartingalePolytope) -> float:
    """Solve ``v'(y) + x = 0`` for the dual level matching initial wealth."""

    def phi(y: float) -> float:
        return dual_value_prime(tree, fld, y, poly=poly) + x

    y_lo, y_hi = 1e-3, 1.0
    for _ in range(80):
        if phi(y_lo) < 0.0:
            break
        y_lo /= 4.0
    for _ in range(80):
        if phi(y_hi) > 0.0:
            break
        y_hi *= 4.0
    if not (phi(y_lo) < 0.0 < phi(y_hi)):
        raise RuntimeError(f"could not bracket the dual level for x={x}")
    return float(optimize.brentq(phi, y_lo, y_hi, xtol=1e-13, rtol=1e-13, maxiter=300))


# ---------------------------------------------------------------------------
# Duality verifier
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""


@dataclass
class DualityReport:
    checks: List[CheckResult]
    u_values: Dict[float, float]
    v_values: Dict[float, float]
    lower_price: float
    upper_price: float

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def verify_duality(tree: EventTree, fld, x_grid: Sequence[float],
                   y_grid: Sequence[float]) -> DualityReport:
    """Run every assertion of the duality theorem on value-function grids.

    Refuses trees with arbitrage (the polytope constructor raises).  Each
    check records a residual; failures carry a plain description of the
    violated property.
    """
    poly = martingale_polytope(tree)
    lower, upper = hedging_prices(tree, poly)
    checks: List[CheckResult] = []

    xs = sorted(float(v) for v in x_grid)
    if xs[0] <= -lower:
        raise ValueError(f"x_grid must stay above the feasibility floor {-lower}")
    primals = {x: solve_primal(tree, fld, x, poly=poly) for x in xs}
    u_vals = {x: primals[x].value for x in xs}

    # (i) u concave and increasing
    uv = [u_vals[x] for x in xs]
    inc_ok = all(b > a for a, b in zip(uv, uv[1:]))
    second = [
        (uv[i + 1] - uv[i]) / (xs[i + 1] - xs[i]) - (uv[i] - uv[i - 1]) / (xs[i] - xs[i - 1])
        for i in range(1, len(xs) - 1)
    ]
    conc_resid = max((max(s, 0.0) for s in second), default=0.0)
    checks.append(CheckResult("value function increasing", inc_ok,
                              0.0 if inc_ok else max(a - b for a, b in zip(uv, uv[1:]))))
    checks.append(CheckResult("value function concave", conc_resid <= 1e-9, conc_resid))

    # (ii) infeasibility below the floor
    x_bad = -lower - 0.01 * (1.0 + abs(lower))
    try:
        solve_primal(tree, fld, x_bad, poly=poly)
        checks.append(CheckResult("infeasibility below wealth floor", False, math.inf,
                                  "primal solve unexpectedly succeeded"))
    except InfeasibleProblemError as err:
        gap = err.x + err.lower_price
        checks.append(CheckResult("infeasibility below wealth floor", gap < 0.0, gap))

    # (iii) v finite and smooth on the y grid
    ys = sorted(float(v) for v in y_grid)
    v_vals = {}
    smooth_resid = 0.0
    for y in ys:
        v_vals[y] = dual_value(tree, fld, y, poly=poly)
        h = 1e-4 * y
        fwd = (dual_value(tree, fld, y + h, poly=poly) - v_vals[y]) / h
        bwd = (v_vals[y] - dual_value(tree, fld, y - h, poly=poly)) / h
        smooth_resid = max(smooth_resid, abs(fwd - bwd) / max(1.0, abs(fwd)))
    finite_ok = all(math.isfinite(v) for v in v_vals.values())
    checks.append(CheckResult("dual value finite on grid", finite_ok,
                              0.0 if finite_ok else math.inf))
    checks.append(CheckResult("dual value differentiable (central-difference smoothness)",
                              smooth_resid <= 5e-3, smooth_resid))

    # (iv) v' approaches the lower hedging price for large y
    tail = [y for y in ys if y >= np.median(ys)]
    if len(tail) >= 2:
        dev = [abs(dual_value_prime(tree, fld, y, poly=poly) - lower) for y in tail]
        trend_ok = all(b <= a + 1e-9 for a, b in zip(dev, dev[1:]))
        checks.append(CheckResult("dual derivative trends to the lower hedging price",
                                  trend_ok, float(dev[-1])))

    # (v) dual attained (solver certificate: stationarity residual)
    att = max(solve_dual(tree, fld, y, poly=poly).kkt_residual for y in ys)
    checks.append(CheckResult("dual attained on the compact measure set", att <= 1e-7, att))

    # (vi) primal optimizer unique (perturbed re-solve)
    x_mid = xs[len(xs) // 2]
    base = primals[x_mid]
    prog = _RecursionProgram(tree, fld)
    z_alt, _ = prog.solve(x_mid, c0_level=3.0 * max(x_mid, 0.5))
    c_alt = np.zeros(tree.n_nodes)
    for val, n in zip(z_alt[: prog.n_c], prog.c_nodes):
        c_alt[n] = val
    mask = tree.dkappa > 0
    uniq = float(np.max(np.abs(c_alt[mask] - base.c_direct[mask]), initial=0.0))
    checks.append(CheckResult("primal optimizer unique under re-solve", uniq <= 1e-7, uniq))

    # (vii) first-order consumption identity at clock-charged nodes
    ident = 0.0
    for x in xs:
        sol = primals[x]
        ident = max(ident, float(np.max(np.abs(sol.c_direct[mask] - sol.c[mask]),
                                        initial=0.0)))
    checks.append(CheckResult(
        "consumption equals inverse marginal of the dual density", ident <= 1e-7, ident))

    # (viii) budget saturation at the optimum
    sat = 0.0
    mass_mat = tree.subtree_mass_matrix()
    for x in xs:
        sol = primals[x]
        net = (sol.c - tree.endow) * tree.dkappa
        if poly.vertices is not None:
            prices = [float(np.sum((mass_mat @ v) * net)) for v in poly.vertices]
            sat = max(sat, abs(max(prices) - x))
        else:
            sat = max(sat, abs(sol.budget_residual))
    checks.append(CheckResult("budget constraint saturated at the optimum",
                              sat <= 1e-8, sat))

    return DualityReport(checks=checks, u_values=u_vals, v_values=v_vals,
                         lower_price=lower, upper_price=upper)
