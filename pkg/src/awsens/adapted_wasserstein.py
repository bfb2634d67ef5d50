"""Adapted (bicausal) Wasserstein distance between scenario trees.

The distance is computed exactly by a backward recursion over synchronized
node pairs: at each pair of time-t nodes, one finite transport problem is
solved between the two child distributions, with the transported cost equal
to the stage cost |x - y|^p plus the already-computed value of the child
pair.  The recursion's optimal plans assemble into a coupling tree that is
bicausal by construction.

A brute-force LP over joint path probabilities with explicit (cross-
multiplied) causality constraints serves as an independent oracle for the
same quantity at small scale.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .discrete_ot import TransportProblem, solve_exact, solve_sorted_1d
from .errors import (
    DeltaTooSmall,
    HorizonMismatch,
    Infeasible,
    InvalidCoupling,
    InvalidParams,
    NotCausal,
    TooLarge,
)
from .process_tree import Node, ScenarioTree

Direction = Literal["x_to_y", "y_to_x"]

ORACLE_MAX_PAIRS = 10_000
ORACLE_MAX_HORIZON = 3


@dataclass(frozen=True)
class AWParams:
    """Order of the distance; the conjugate exponent is always derived."""

    p: float
    q: float = field(init=False)

    def __post_init__(self):
        if not (self.p > 1.0 and math.isfinite(self.p)):
            raise InvalidParams(f"the order p must lie in (1, inf), got {self.p}")
        object.__setattr__(self, "q", self.p / (self.p - 1.0))


@dataclass(frozen=True)
class PairNode:
    """Node of a synchronized product tree: one x node, one y node, a joint
    transition probability given the parent pair."""

    id: int
    time: int
    x_node: int
    y_node: int
    cond_prob: float
    parent: int | None


class CouplingTree:
    """A coupling between two scenario trees as a synchronized product tree.

    Construction validates that projecting the joint path probabilities onto
    either coordinate reproduces the corresponding tree's node probabilities.
    Causality is a property of the transition kernels and is *not* enforced
    here; use :func:`check_causal`.
    """

    __slots__ = ("first", "second", "pair_nodes", "children", "prob", "root")

    def __init__(
        self,
        first: ScenarioTree,
        second: ScenarioTree,
        pair_nodes: Sequence[PairNode],
        marginal_tol: float = 1e-10,
    ):
        if first.horizon != second.horizon:
            raise HorizonMismatch("coupled trees must share one horizon")
        pair_nodes = list(pair_nodes)
        n = len(pair_nodes)
        for k, pn in enumerate(pair_nodes):
            if pn.id != k:
                raise InvalidCoupling(f"pair node ids must equal list positions; got {pn.id} at {k}")
        roots = [pn for pn in pair_nodes if pn.parent is None]
        if len(roots) != 1 or roots[0].x_node != first.root or roots[0].y_node != second.root:
            raise InvalidCoupling("expected exactly one root pair covering both tree roots")
        root = roots[0].id

        children: list[list[int]] = [[] for _ in range(n)]
        for pn in pair_nodes:
            if pn.parent is None:
                continue
            par = pair_nodes[pn.parent]
            if pn.time != par.time + 1:
                raise InvalidCoupling(f"pair node {pn.id} skips time levels")
            if pn.x_node not in first.children[par.x_node]:
                raise InvalidCoupling(f"pair node {pn.id} breaks the first tree's edges")
            if pn.y_node not in second.children[par.y_node]:
                raise InvalidCoupling(f"pair node {pn.id} breaks the second tree's edges")
            if not (0.0 < pn.cond_prob <= 1.0):
                raise InvalidCoupling(f"pair node {pn.id} has cond_prob outside (0, 1]")
            children[pn.parent].append(pn.id)

        prob = [0.0] * n
        prob[root] = 1.0
        order = [root]
        for nid in order:
            kids = children[nid]
            if kids:
                s = sum(pair_nodes[c].cond_prob for c in kids)
                if abs(s - 1.0) > 1e-9:
                    raise InvalidCoupling(f"joint kernel at pair node {nid} sums to {s!r}")
                seenxy = set()
                for c in kids:
                    key = (pair_nodes[c].x_node, pair_nodes[c].y_node)
                    if key in seenxy:
                        raise InvalidCoupling(f"duplicate child pair {key} under pair node {nid}")
                    seenxy.add(key)
                    prob[c] = prob[nid] * pair_nodes[c].cond_prob
                    order.append(c)
            elif pair_nodes[nid].time != first.horizon:
                raise InvalidCoupling(f"pair node {nid} ends before the horizon")
        if len(order) != n:
            raise InvalidCoupling("coupling contains pair nodes unreachable from the root")

        marg_x = [0.0] * len(first.nodes)
        marg_y = [0.0] * len(second.nodes)
        for pn in pair_nodes:
            marg_x[pn.x_node] += prob[pn.id]
            marg_y[pn.y_node] += prob[pn.id]
        for nid, target in enumerate(first.node_prob):
            if abs(marg_x[nid] - target) > marginal_tol:
                raise InvalidCoupling(
                    f"first marginal off by {marg_x[nid] - target!r} at node {nid}"
                )
        for nid, target in enumerate(second.node_prob):
            if abs(marg_y[nid] - target) > marginal_tol:
                raise InvalidCoupling(
                    f"second marginal off by {marg_y[nid] - target!r} at node {nid}"
                )

        self.first = first
        self.second = second
        self.pair_nodes = tuple(pair_nodes)
        self.children = tuple(tuple(c) for c in children)
        self.prob = tuple(prob)
        self.root = root

    def stage_costs(self, p: float) -> tuple[float, ...]:
        """E[|X_t - Y_t|^p] per stage under the coupling."""
        T = self.first.horizon
        out = [0.0] * T
        for pn in self.pair_nodes:
            if pn.time == 0:
                continue
            dx = self.first.nodes[pn.x_node].value - self.second.nodes[pn.y_node].value
            out[pn.time - 1] += self.prob[pn.id] * abs(dx) ** p
        return tuple(out)


@dataclass(frozen=True)
class AWResult:
    """Adapted distance with its p-th power, per-stage costs and optimal coupling."""

    distance: float
    pth_power: float
    per_stage_costs: tuple[float, ...]
    coupling: CouplingTree


def check_causal(coupling: CouplingTree, direction: Direction, tol: float = 1e-10) -> bool:
    """Kernel-factorization causality check.

    ``x_to_y`` verifies that, at every reachable pair node, projecting the
    joint transition kernel onto the first coordinate reproduces the first
    tree's kernel: given the joint past, the next step of X carries no
    information about Y's past.  This one-step factorization at every node is
    equivalent to the conditional-independence form of causality, and it
    needs no division by small path probabilities.
    """
    if direction == "x_to_y":
        tree = coupling.first
        pick = operator.attrgetter("x_node")
    elif direction == "y_to_x":
        tree = coupling.second
        pick = operator.attrgetter("y_node")
    else:
        raise InvalidParams(f"unknown direction {direction!r}")
    for pn in coupling.pair_nodes:
        kids = coupling.children[pn.id]
        if not kids:
            continue
        proj: dict[int, float] = {}
        for c in kids:
            child = coupling.pair_nodes[c]
            proj[pick(child)] = proj.get(pick(child), 0.0) + child.cond_prob
        for marg_child in tree.children[pick(pn)]:
            expected = tree.nodes[marg_child].cond_prob
            if abs(proj.pop(marg_child, 0.0) - expected) > tol:
                return False
        if proj:
            return False
    return True


def is_bicausal(coupling: CouplingTree, tol: float = 1e-10) -> bool:
    return check_causal(coupling, "x_to_y", tol) and check_causal(coupling, "y_to_x", tol)


def product_coupling(P: ScenarioTree, Q: ScenarioTree) -> CouplingTree:
    """Independent coupling: the joint kernel is the product of the marginals."""
    if P.horizon != Q.horizon:
        raise HorizonMismatch("product coupling needs equal horizons")
    pairs = [PairNode(0, 0, P.root, Q.root, 1.0, None)]
    queue = [(0, P.root, Q.root)]
    while queue:
        pid, xn, yn = queue.pop()
        for xc in P.children[xn]:
            for yc in Q.children[yn]:
                w = P.nodes[xc].cond_prob * Q.nodes[yc].cond_prob
                nid = len(pairs)
                pairs.append(PairNode(nid, P.nodes[xc].time, xc, yc, w, pid))
                queue.append((nid, xc, yc))
    return CouplingTree(P, Q, pairs)


# -- exact distance via backward recursion ------------------------------------


def aw_distance(P: ScenarioTree, Q: ScenarioTree, params: AWParams) -> AWResult:
    """Exact adapted distance by dynamic programming over node pairs.

    The last stage uses the monotone 1-d fast path (the stage cost has no
    value-function addend there); all interior stages solve the full
    transport problem since the recursion's cost matrix need not be
    submodular.
    """
    if P.horizon != Q.horizon:
        raise HorizonMismatch(f"horizons differ: {P.horizon} vs {Q.horizon}")
    T = P.horizon
    p = params.p

    values: dict[tuple[int, int], float] = {}
    plans: dict[tuple[int, int], tuple[np.ndarray, tuple[int, ...], tuple[int, ...]]] = {}
    for t in range(T - 1, -1, -1):
        level_values: dict[tuple[int, int], float] = {}
        for xn in P.levels[t]:
            xc = P.children[xn]
            xv = np.array([P.nodes[c].value for c in xc])
            xw = np.array([P.nodes[c].cond_prob for c in xc])
            for yn in Q.levels[t]:
                yc = Q.children[yn]
                yv = np.array([Q.nodes[c].value for c in yc])
                yw = np.array([Q.nodes[c].cond_prob for c in yc])
                if t == T - 1:
                    ox = np.argsort(xv, kind="stable")
                    oy = np.argsort(yv, kind="stable")
                    sub = solve_sorted_1d(xv[ox], xw[ox], yv[oy], yw[oy], p)
                    plan = np.zeros_like(sub.plan)
                    plan[np.ix_(ox, oy)] = sub.plan
                    obj = sub.objective
                else:
                    cost = np.abs(xv[:, None] - yv[None, :]) ** p
                    for i, cxi in enumerate(xc):
                        for j, cyj in enumerate(yc):
                            cost[i, j] += values[(cxi, cyj)]
                    sub = solve_exact(TransportProblem(xw, yw, cost))
                    plan = sub.plan
                    obj = sub.objective
                level_values[(xn, yn)] = obj
                plans[(xn, yn)] = (plan, xc, yc)
        values = level_values

    pth_power = values[(P.root, Q.root)]
    pairs = [PairNode(0, 0, P.root, Q.root, 1.0, None)]
    queue = [(0, P.root, Q.root)]
    while queue:
        pid, xn, yn = queue.pop()
        plan, xc, yc = plans[(xn, yn)]
        for i, j in zip(*np.nonzero(plan > 1e-15)):
            nid = len(pairs)
            pairs.append(
                PairNode(nid, P.nodes[xc[i]].time, xc[i], yc[j], float(plan[i, j]), pid)
            )
            if P.nodes[xc[i]].time < T:
                queue.append((nid, xc[i], yc[j]))
    coupling = CouplingTree(P, Q, pairs)
    return AWResult(
        distance=pth_power ** (1.0 / p),
        pth_power=pth_power,
        per_stage_costs=coupling.stage_costs(p),
        coupling=coupling,
    )


def flat_wasserstein(P: ScenarioTree, Q: ScenarioTree, params: AWParams) -> tuple[float, float]:
    """Ordinary Wasserstein-p distance with cost sum_t |x_t - y_t|^p.

    One transport problem over whole paths, ignoring both filtrations.
    Returns ``(distance, pth_power)``.
    """
    if P.horizon != Q.horizon:
        raise HorizonMismatch(f"horizons differ: {P.horizon} vs {Q.horizon}")
    xp = P.paths
    yq = Q.paths
    cost = np.abs(xp.values[:, None, :] - yq.values[None, :, :]) ** params.p
    plan = solve_exact(TransportProblem(xp.probs, yq.probs, cost.sum(axis=2)))
    return plan.objective ** (1.0 / params.p), plan.objective


# -- brute-force oracle --------------------------------------------------------


def _prefix_groups(tree: ScenarioTree, t: int) -> list[np.ndarray]:
    """Path indices grouped by their time-t ancestor node."""
    anc = tree.ancestor_matrix[:, t]
    return [np.nonzero(anc == nid)[0] for nid in tree.levels[t]]


def brute_force_bicausal(P: ScenarioTree, Q: ScenarioTree, params: AWParams) -> AWResult:
    """LP over joint path probabilities with explicit bicausality constraints.

    The causality identities are written multiplicatively, cleared of
    denominators: for paths x, x' sharing their time-t prefix and any time-t
    prefix class H of the other tree,
    ``pi(x, H) * w(x') == pi(x', H) * w(x)``.
    """
    if P.horizon != Q.horizon:
        raise HorizonMismatch(f"horizons differ: {P.horizon} vs {Q.horizon}")
    T = P.horizon
    xp, yq = P.paths, Q.paths
    m, n = len(xp), len(yq)
    if m * n > ORACLE_MAX_PAIRS or T > ORACLE_MAX_HORIZON:
        raise TooLarge(
            f"oracle limited to {ORACLE_MAX_PAIRS} path pairs and horizon {ORACLE_MAX_HORIZON}"
        )

    cost = (np.abs(xp.values[:, None, :] - yq.values[None, :, :]) ** params.p).sum(axis=2)

    def var(i: int, j: int) -> int:
        return i * n + j

    rows: list[int] = []
    cols: list[int] = []
    data: list[float] = []
    rhs: list[float] = []

    def add_row(entries: dict[int, float], b: float) -> None:
        r = len(rhs)
        for c, val in entries.items():
            rows.append(r)
            cols.append(c)
            data.append(val)
        rhs.append(b)

    for i in range(m):
        add_row({var(i, j): 1.0 for j in range(n)}, float(xp.probs[i]))
    for j in range(n):
        add_row({var(i, j): 1.0 for i in range(m)}, float(yq.probs[j]))

    def causality_rows(groups_a, groups_b, w_a, swap: bool) -> None:
        for ga in groups_a:
            if len(ga) < 2:
                continue
            rep = int(ga[0])
            for other in ga[1:]:
                other = int(other)
                for gb in groups_b:
                    entries: dict[int, float] = {}
                    for jb in gb:
                        jb = int(jb)
                        key = var(jb, rep) if swap else var(rep, jb)
                        entries[key] = entries.get(key, 0.0) - float(w_a[other])
                        key = var(jb, other) if swap else var(other, jb)
                        entries[key] = entries.get(key, 0.0) + float(w_a[rep])
                    add_row(entries, 0.0)

    for t in range(1, T):
        causality_rows(_prefix_groups(P, t), _prefix_groups(Q, t), xp.probs, swap=False)
        causality_rows(_prefix_groups(Q, t), _prefix_groups(P, t), yq.probs, swap=True)

    A = sp.coo_matrix((data, (rows, cols)), shape=(len(rhs), m * n))
    res = linprog(
        c=cost.reshape(-1),
        A_eq=A.tocsr(),
        b_eq=np.array(rhs),
        bounds=(0.0, None),
        method="highs",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if res.status != 0:
        raise Infeasible(f"bicausal oracle LP failed: {res.message}")
    pi = res.x.reshape(m, n)
    pth_power = float(res.fun)
    per_stage = tuple(
        float(np.sum(pi * np.abs(xp.values[:, None, t] - yq.values[None, :, t]) ** params.p))
        for t in range(T)
    )
    coupling = coupling_from_path_matrix(P, Q, pi, marginal_tol=1e-7)
    return AWResult(
        distance=pth_power ** (1.0 / params.p),
        pth_power=pth_power,
        per_stage_costs=per_stage,
        coupling=coupling,
    )


def coupling_from_path_matrix(
    P: ScenarioTree,
    Q: ScenarioTree,
    pi: np.ndarray,
    mass_tol: float = 1e-12,
    marginal_tol: float = 1e-8,
) -> CouplingTree:
    """Fold a joint law over path pairs into a synchronized product tree.

    Entries below ``mass_tol`` are dropped and each transition family is
    renormalized, so solver dust does not produce spurious pair nodes.
    """
    T = P.horizon
    ancP, ancQ = P.ancestor_matrix, Q.ancestor_matrix
    pairs = [PairNode(0, 0, P.root, Q.root, 1.0, None)]
    live = [(i, j) for i, j in zip(*np.nonzero(pi > mass_tol))]

    def rec(pid: int, members: list[tuple[int, int]], mass: float, t: int) -> None:
        if t > T:
            return
        groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for i, j in members:
            groups.setdefault((int(ancP[i, t]), int(ancQ[j, t])), []).append((i, j))
        masses = {key: sum(float(pi[i, j]) for i, j in grp) for key, grp in groups.items()}
        total = sum(masses.values())
        for key in sorted(groups):
            grp = groups[key]
            nid = len(pairs)
            pairs.append(PairNode(nid, t, key[0], key[1], masses[key] / total, pid))
            rec(nid, grp, masses[key], t + 1)

    rec(0, live, 1.0, 1)
    return CouplingTree(P, Q, pairs, marginal_tol=marginal_tol)


# -- bicausalization (discrete second-marginal perturbation) -------------------


def bicausalize(coupling: CouplingTree, delta: float) -> tuple[CouplingTree, ScenarioTree]:
    """Perturb the second marginal by at most ``delta`` so the coupling
    becomes bicausal.

    Each coupled y value is snapped to the grid ``delta * floor(y / delta)``
    and then shifted by a sub-delta offset that injectively encodes the
    paired x value, so the x coordinate becomes readable from the perturbed y
    coordinate.  The input must already be causal in the x-to-y direction.
    """
    if delta <= 0.0:
        raise InvalidParams(f"delta must be positive, got {delta}")
    if not check_causal(coupling, "x_to_y"):
        raise NotCausal("bicausalize requires a coupling causal from x to y")
    P, Q = coupling.first, coupling.second
    parent = [pn.parent for pn in coupling.pair_nodes]
    time = [pn.time for pn in coupling.pair_nodes]
    x_node = [pn.x_node for pn in coupling.pair_nodes]
    y_value = [
        Q.nodes[pn.y_node].value if pn.parent is not None else None
        for pn in coupling.pair_nodes
    ]
    prob = list(coupling.prob)
    return _bicausalize_pairs(P, parent, time, x_node, y_value, prob, delta)


def _bicausalize_pairs(
    P: ScenarioTree,
    parent: list[int | None],
    time: list[int],
    x_node: list[int],
    y_value: list[float | None],
    prob: list[float],
    delta: float,
) -> tuple[CouplingTree, ScenarioTree]:
    """Shared quotient construction behind :func:`bicausalize`.

    The pair tree is given explicitly (parents, x nodes, raw y values, joint
    node probabilities); the output merges pair nodes with equal perturbed
    y histories into canonical nodes of the new second-marginal tree.
    """
    T = P.horizon
    n = len(parent)
    offsets: list[dict[float, float]] = [{} for _ in range(T + 1)]
    for t in range(1, T + 1):
        vals = sorted({P.nodes[nid].value for nid in P.levels[t]})
        for k, v in enumerate(vals):
            offsets[t][v] = (k + 1) * delta / (2.0 * (len(vals) + 1))

    cell = [0] * n
    ynew = [0.0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    root = None
    for pid in range(n):
        if parent[pid] is None:
            root = pid
            continue
        children[parent[pid]].append(pid)
        t = time[pid]
        xval = P.nodes[x_node[pid]].value
        cell[pid] = math.floor(y_value[pid] / delta)
        ynew[pid] = cell[pid] * delta + offsets[t][xval]

    q_nodes = [Node(0, 0, None, 1.0, None)]
    new_pairs = [PairNode(0, 0, P.root, 0, 1.0, None)]
    # classes: members share one x node and one perturbed-y history
    stack = [(0, [root], 1.0)]
    while stack:
        new_pid, members, mass = stack.pop()
        kids = [c for pid in members for c in children[pid]]
        if not kids:
            continue
        groups: dict[float, list[int]] = {}
        for c in sorted(kids, key=lambda c: (ynew[c], x_node[c])):
            groups.setdefault(ynew[c], []).append(c)
        for yv, grp in groups.items():
            keys = {(cell[c], P.nodes[x_node[c]].value) for c in grp}
            if len(keys) > 1:
                raise DeltaTooSmall(
                    f"encoded values collide at {yv!r}; decrease the atom count or increase delta"
                )
            gmass = sum(prob[c] for c in grp)
            qid = len(q_nodes)
            parent_qid = new_pairs[new_pid].y_node
            q_nodes.append(Node(qid, time[grp[0]], yv, gmass / mass, parent_qid))
            npid = len(new_pairs)
            new_pairs.append(
                PairNode(npid, time[grp[0]], x_node[grp[0]], qid, gmass / mass, new_pid)
            )
            stack.append((npid, grp, gmass))
    q_tree = ScenarioTree(T, q_nodes)
    return CouplingTree(P, q_tree, new_pairs), q_tree
