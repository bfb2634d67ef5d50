"""Finitely supported adapted processes encoded as rooted scenario trees.

A scenario tree holds the law of a real-valued discrete-time process together
with its natural filtration: nodes at depth t are the atoms of the time-t
filtration, the root (time 0) carries no value, and every root-to-leaf path is
one support point of the law.  Sibling values must be pairwise distinct so
that the tree filtration coincides with the filtration generated by the
process itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import InvalidParams, InvalidTree

PROB_TOL = 1e-12


@dataclass(frozen=True)
class Node:
    """One atom of the filtration.

    ``value`` is the coordinate of the process on this atom and is ``None``
    exactly at the root.  ``cond_prob`` is the transition probability given
    the parent (stored as 1.0 at the root).
    """

    id: int
    time: int
    value: float | None
    cond_prob: float
    parent: int | None


@dataclass(frozen=True)
class PathTable:
    """All root-to-leaf paths: leaf ids, value vectors and path probabilities."""

    leaf_ids: tuple[int, ...]
    values: np.ndarray  # shape (n_paths, T)
    probs: np.ndarray  # shape (n_paths,)

    def __len__(self) -> int:
        return len(self.leaf_ids)

    def __iter__(self) -> Iterator[tuple[int, np.ndarray, float]]:
        for k, leaf in enumerate(self.leaf_ids):
            yield leaf, self.values[k], float(self.probs[k])


class ScenarioTree:
    """Immutable rooted tree with one value per non-root node.

    Node ids are their indices in ``nodes``.  All derived structure
    (children, levels, unconditional node probabilities, path table) is
    computed once at construction; instances are safe to share between
    workers.
    """

    __slots__ = (
        "horizon",
        "nodes",
        "root",
        "children",
        "levels",
        "leaves",
        "node_prob",
        "_paths",
        "_ancestors",
    )

    def __init__(self, horizon: int, nodes: Sequence[Node]):
        if horizon < 1:
            raise InvalidTree(f"horizon must be >= 1, got {horizon}")
        nodes = list(nodes)
        n = len(nodes)
        for k, nd in enumerate(nodes):
            if nd.id != k:
                raise InvalidTree(f"node ids must equal list positions; nodes[{k}] has id {nd.id}")

        roots = [nd.id for nd in nodes if nd.parent is None]
        if len(roots) != 1:
            raise InvalidTree(f"expected exactly one root, found {len(roots)}")
        root = roots[0]
        rn = nodes[root]
        if rn.time != 0 or rn.value is not None:
            raise InvalidTree("root must sit at time 0 and carry no value")

        children: list[list[int]] = [[] for _ in range(n)]
        for nd in nodes:
            if nd.parent is None:
                continue
            if not (0 <= nd.parent < n):
                raise InvalidTree(f"node {nd.id} references unknown parent {nd.parent}")
            par = nodes[nd.parent]
            if nd.time != par.time + 1:
                raise InvalidTree(f"node {nd.id} at time {nd.time} has parent at time {par.time}")
            if nd.time > horizon:
                raise InvalidTree(f"node {nd.id} lies beyond the horizon {horizon}")
            if nd.value is None or not math.isfinite(nd.value):
                raise InvalidTree(f"node {nd.id} must carry a finite value")
            if not (0.0 < nd.cond_prob <= 1.0):
                raise InvalidTree(f"node {nd.id} has cond_prob {nd.cond_prob} outside (0, 1]")
            children[nd.parent].append(nd.id)

        for nd in nodes:
            kids = children[nd.id]
            if not kids:
                if nd.time != horizon:
                    raise InvalidTree(f"node {nd.id} is a leaf at time {nd.time} != horizon {horizon}")
                continue
            s = sum(nodes[c].cond_prob for c in kids)
            if abs(s - 1.0) > PROB_TOL:
                raise InvalidTree(f"children of node {nd.id} have probabilities summing to {s!r}")
            vals = [nodes[c].value for c in kids]
            if len(set(vals)) != len(vals):
                raise InvalidTree(f"children of node {nd.id} carry duplicate values")

        levels: list[list[int]] = [[] for _ in range(horizon + 1)]
        order: list[int] = [root]
        node_prob = [0.0] * n
        node_prob[root] = 1.0
        seen = 1
        for nid in order:
            levels[nodes[nid].time].append(nid)
            for c in children[nid]:
                node_prob[c] = node_prob[nid] * nodes[c].cond_prob
                order.append(c)
                seen += 1
        if seen != n:
            raise InvalidTree("tree contains nodes unreachable from the root")

        leaves = levels[horizon]
        total = sum(node_prob[leaf] for leaf in leaves)
        if abs(total - 1.0) > PROB_TOL:
            raise InvalidTree(f"leaf path probabilities sum to {total!r}")

        self.horizon = horizon
        self.nodes = tuple(nodes)
        self.root = root
        self.children = tuple(tuple(c) for c in children)
        self.levels = tuple(tuple(lv) for lv in levels)
        self.leaves = tuple(leaves)
        self.node_prob = tuple(node_prob)

        anc = np.empty((len(leaves), horizon + 1), dtype=np.int64)
        vals = np.empty((len(leaves), horizon), dtype=np.float64)
        for k, leaf in enumerate(leaves):
            nid = leaf
            for t in range(horizon, 0, -1):
                anc[k, t] = nid
                vals[k, t - 1] = self.nodes[nid].value
                nid = self.nodes[nid].parent
            anc[k, 0] = nid
        vals.setflags(write=False)
        anc.setflags(write=False)
        probs = np.array([node_prob[leaf] for leaf in leaves])
        probs.setflags(write=False)
        self._paths = PathTable(tuple(leaves), vals, probs)
        self._ancestors = anc

    # -- structural views ---------------------------------------------------

    @property
    def paths(self) -> PathTable:
        return self._paths

    def ancestor(self, leaf: int, t: int) -> int:
        """Node id of the time-t ancestor of ``leaf`` (t = horizon gives the leaf)."""
        k = self.leaves.index(leaf)
        return int(self._ancestors[k, t])

    @property
    def ancestor_matrix(self) -> np.ndarray:
        """(n_paths, horizon + 1) matrix: column t holds the time-t node of each path."""
        return self._ancestors

    def value(self, node_id: int) -> float:
        v = self.nodes[node_id].value
        if v is None:
            raise InvalidParams("the root carries no value")
        return v


def enumerate_paths(tree: ScenarioTree) -> PathTable:
    """Return one entry per leaf with the path values and the product probability."""
    return tree.paths


def conditional_expectation(
    tree: ScenarioTree, leaf_values: Mapping[int, float], t: int
) -> dict[int, float]:
    """Conditional expectation of a leaf function given the time-t filtration.

    Computed by one backward averaging sweep per time step, so applying it at
    time t and then coarsening to s <= t runs through the same arithmetic as
    conditioning at s directly.
    """
    if not (0 <= t <= tree.horizon):
        raise InvalidParams(f"time {t} outside 0..{tree.horizon}")
    try:
        vals = {leaf: float(leaf_values[leaf]) for leaf in tree.leaves}
    except KeyError as e:
        raise InvalidParams(f"leaf_values is missing leaf {e.args[0]}") from None
    for u in range(tree.horizon - 1, t - 1, -1):
        vals = {
            nid: sum(tree.nodes[c].cond_prob * vals[c] for c in tree.children[nid])
            for nid in tree.levels[u]
        }
    return {nid: vals[nid] for nid in tree.levels[t]}


def pth_moment(tree: ScenarioTree, p: float) -> float:
    """Sum over stages of E|X_t|^p, computed from node probabilities."""
    total = 0.0
    for t in range(1, tree.horizon + 1):
        total += sum(
            tree.node_prob[nid] * abs(tree.nodes[nid].value) ** p for nid in tree.levels[t]
        )
    return total


# -- generators --------------------------------------------------------------


class _Builder:
    """Accumulates nodes in BFS order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = [Node(0, 0, None, 1.0, None)]

    def add(self, parent: int, time: int, value: float, cond_prob: float) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, time, float(value), float(cond_prob), parent))
        return nid

    def build(self, horizon: int) -> ScenarioTree:
        return ScenarioTree(horizon, self.nodes)


def tree_from_nested(horizon: int, spec: Sequence) -> ScenarioTree:
    """Build a tree from nested ``(value, cond_prob, children)`` triples.

    ``spec`` lists the children of the root; each entry is
    ``(value, prob, [children...])`` with the child list omitted or empty at
    the leaves.
    """
    b = _Builder()

    def rec(parent: int, time: int, entries: Sequence) -> None:
        for entry in entries:
            value, prob = entry[0], entry[1]
            kids = entry[2] if len(entry) > 2 else ()
            nid = b.add(parent, time, value, prob)
            if kids:
                rec(nid, time + 1, kids)

    rec(0, 1, spec)
    return b.build(horizon)


def gen_binomial(
    T: int, start: float, up: float, down: float, p_up: float, drift: float = 0.0
) -> ScenarioTree:
    """Binomial tree: X_t = X_{t-1} + drift + {up, down}, X_0 = start.

    Recombination is never merged; the result has 2^T leaves.
    """
    if T < 1:
        raise InvalidParams(f"T must be >= 1, got {T}")
    if not (0.0 < p_up < 1.0):
        raise InvalidParams(f"p_up must lie in (0, 1), got {p_up}")
    if up == down:
        raise InvalidParams("up and down steps must differ")
    b = _Builder()
    frontier = [(0, float(start))]
    for t in range(1, T + 1):
        nxt = []
        for parent, x in frontier:
            for step, prob in ((up, p_up), (down, 1.0 - p_up)):
                v = x + drift + step
                nid = b.add(parent, t, v, prob)
                nxt.append((nid, v))
        frontier = nxt
    return b.build(T)


def gen_lattice(
    T: int,
    start: float,
    steps: Sequence[float],
    probs: Sequence[float],
    drift: float = 0.0,
) -> ScenarioTree:
    """Random walk with an arbitrary finite step distribution, emitted as a full tree."""
    if T < 1:
        raise InvalidParams(f"T must be >= 1, got {T}")
    steps = [float(s) for s in steps]
    probs = [float(w) for w in probs]
    if len(steps) < 2 or len(steps) != len(probs):
        raise InvalidParams("steps and probs must have equal length >= 2")
    if len(set(steps)) != len(steps):
        raise InvalidParams("steps must be pairwise distinct")
    if any(w <= 0.0 for w in probs):
        raise InvalidParams("step probabilities must be strictly positive")
    if abs(sum(probs) - 1.0) > PROB_TOL:
        raise InvalidParams(f"step probabilities sum to {sum(probs)!r}")
    b = _Builder()
    frontier = [(0, float(start))]
    for t in range(1, T + 1):
        nxt = []
        for parent, x in frontier:
            for step, prob in zip(steps, probs):
                v = x + drift + step
                nid = b.add(parent, t, v, prob)
                nxt.append((nid, v))
        frontier = nxt
    return b.build(T)


def gen_random(T: int, branching: int, seed: int) -> ScenarioTree:
    """Deterministic random tree with dyadic transition probabilities.

    Probabilities are multiples of 2^-10 and values are multiples of 2^-20,
    so families sum to exactly 1.0 in binary64 and repeated calls with one
    seed reproduce the tree bit for bit.
    """
    if T < 1:
        raise InvalidParams(f"T must be >= 1, got {T}")
    if branching < 2:
        raise InvalidParams(f"branching must be >= 2, got {branching}")
    rng = np.random.default_rng(seed)
    b = _Builder()
    frontier = [(0, 0.0)]
    for t in range(1, T + 1):
        nxt = []
        for parent, x in frontier:
            counts = rng.multinomial(1024 - branching, [1.0 / branching] * branching) + 1
            incs = rng.choice(2**21, size=branching, replace=False)
            for k in range(branching):
                prob = counts[k] / 1024.0
                v = x + (int(incs[k]) - 2**20) / 2.0**20
                nid = b.add(parent, t, v, prob)
                nxt.append((nid, v))
        frontier = nxt
    return b.build(T)


# -- structural utilities ----------------------------------------------------


def drop_last_stage(tree: ScenarioTree) -> ScenarioTree:
    """Forget the time-T coordinate: old time-(T-1) nodes become leaves."""
    if tree.horizon < 2:
        raise InvalidParams("cannot drop the last stage of a one-period tree")
    keep = [nd for nd in tree.nodes if nd.time < tree.horizon]
    remap = {nd.id: k for k, nd in enumerate(keep)}
    nodes = [
        Node(remap[nd.id], nd.time, nd.value, nd.cond_prob,
             None if nd.parent is None else remap[nd.parent])
        for nd in keep
    ]
    return ScenarioTree(tree.horizon - 1, nodes)


def is_isomorphic(a: ScenarioTree, b: ScenarioTree) -> bool:
    """Labeled-tree isomorphism: same branching values and probabilities.

    Sibling-distinct values make this equivalent to equality of the adapted
    laws, hence to a vanishing adapted distance.
    """
    if a.horizon != b.horizon:
        return False

    def rec(na: int, nb: int) -> bool:
        ka, kb = a.children[na], b.children[nb]
        if len(ka) != len(kb):
            return False
        sa = sorted(ka, key=lambda i: a.nodes[i].value)
        sb = sorted(kb, key=lambda i: b.nodes[i].value)
        for ca, cb in zip(sa, sb):
            if a.nodes[ca].value != b.nodes[cb].value:
                return False
            if a.nodes[ca].cond_prob != b.nodes[cb].cond_prob:
                return False
            if not rec(ca, cb):
                return False
        return True

    return rec(a.root, b.root)
