"""First-order sensitivities of the three problem classes under adapted
perturbations, and the Hoelder-dual direction that attains them.

For each class, the report carries the conditional-gradient process

    G_t = E[ d/dx_t (integrand at the optimizer) | time-t atom ],

its per-stage q-th moments E|G_t|^q, and the scalar first-order term
(sum_t E|G_t|^q)^(1/q), where q is the exponent conjugate to the ball order
p.  The worst-case direction realizes equality in both Hoelder pairings
(stages, then paths) and is attached to nodes, so it is adapted by
construction; shifting the tree along it produces a model inside the
radius-r ball whose value climbs at the first-order rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapted_wasserstein import (
    AWParams,
    CouplingTree,
    PairNode,
    _bicausalize_pairs,
    aw_distance,
)
from .cost_models import CostModel, UtilityModel, build_utility_cost
from .errors import AwsensError, DeltaTooSmall, FlatStep, InvalidParams
from .multistage_opt import ControlBounds, ControlPolicy, solve_value
from .optimal_stopping import solve_stopping
from .process_tree import Node, ScenarioTree, conditional_expectation


@dataclass(frozen=True)
class SensitivityReport:
    problem_class: str
    p: float
    q: float
    cond_grads: dict[int, dict[int, float]]  # time t -> node id -> value
    stage_qnorms: tuple[float, ...]  # E |G_t|^q per stage
    first_order: float


@dataclass(frozen=True)
class WorstCaseDirection:
    p: float
    q: float
    values: dict[int, dict[int, float]]  # time t -> node id -> direction value
    stage_weights: tuple[float, ...]
    norm_check: float  # sum_t E |Z_t|^p
    pairing: float  # sum_t E [G_t Z_t]
    degenerate: bool


def _report_from_node_values(
    tree: ScenarioTree, node_vals: dict[int, dict[int, float]], p: float, problem_class: str
) -> SensitivityReport:
    q = p / (p - 1.0)
    qnorms = []
    for t in range(1, tree.horizon + 1):
        qnorms.append(
            sum(tree.node_prob[nid] * abs(v) ** q for nid, v in node_vals[t].items())
        )
    return SensitivityReport(
        problem_class=problem_class,
        p=p,
        q=q,
        cond_grads=node_vals,
        stage_qnorms=tuple(qnorms),
        first_order=sum(qnorms) ** (1.0 / q),
    )


def _condition_leaf_gradients(
    tree: ScenarioTree, leaf_grads: np.ndarray, p: float, problem_class: str
) -> SensitivityReport:
    node_vals: dict[int, dict[int, float]] = {}
    for t in range(1, tree.horizon + 1):
        leaf_map = {leaf: float(leaf_grads[k, t - 1]) for k, leaf in enumerate(tree.leaves)}
        node_vals[t] = conditional_expectation(tree, leaf_map, t)
    return _report_from_node_values(tree, node_vals, p, problem_class)


def sensitivity_terminal(tree: ScenarioTree, model: CostModel, p: float) -> SensitivityReport:
    """First-order term for plain expectation functionals."""
    if model.kind != "terminal":
        raise InvalidParams(f"expected a terminal model, got {model.kind!r}")
    AWParams(p)  # validates p > 1
    grads = model.grad_x_fn(tree.paths.values)
    return _condition_leaf_gradients(tree, grads, p, "terminal")


def sensitivity_control(
    tree: ScenarioTree,
    model: CostModel,
    bounds: ControlBounds,
    p: float,
    tol: float = 1e-9,
) -> tuple[SensitivityReport, ControlPolicy]:
    """First-order term for the controlled problem, at the unique optimizer."""
    if model.kind != "controlled":
        raise InvalidParams(f"expected a controlled model, got {model.kind!r}")
    AWParams(p)
    rep = solve_value(tree, model, bounds, tol=tol)
    actions = rep.policy.path_matrix(tree)
    grads = model.grad_x_fn(tree.paths.values, actions)
    return _condition_leaf_gradients(tree, grads, p, "controlled"), rep.policy


def sensitivity_stopping(
    tree: ScenarioTree, model: CostModel, p: float, tol: float = 1e-9
) -> tuple[SensitivityReport, dict[int, int]]:
    """First-order term for optimal stopping, at the unique stopping time."""
    if model.kind != "stopping":
        raise InvalidParams(f"expected a stopping model, got {model.kind!r}")
    AWParams(p)
    _, policy, _ = solve_stopping(tree, model, tol=tol)
    xs = tree.paths.values
    grads = np.zeros_like(xs)
    taus = np.array([policy.tau[leaf] for leaf in tree.leaves])
    for t in range(1, tree.horizon + 1):
        mask = taus == t
        if np.any(mask):
            grads[mask] = model.grad_x_fn(xs[mask], t)
    report = _condition_leaf_gradients(tree, grads, p, "stopping")
    return report, policy.tau


def utility_first_order(
    tree: ScenarioTree,
    u: UtilityModel,
    bounds: ControlBounds,
    p: float,
    tol: float = 1e-9,
) -> tuple[SensitivityReport, ControlPolicy]:
    """Closed-form first-order term for the hedging objective.

    Per stage, the conditional-gradient process is

        (a*_{t+1} - a*_t) E[l'(W) | F_t] - E[l'(W) d/dx_t g(X) | F_t]

    with a*_{T+1} = 0 and W the hedged terminal position at the optimizer.
    The tree must have no flat steps (no atom with x_t = x_{t-1}).
    """
    AWParams(p)
    xs = tree.paths.values
    lagged = np.concatenate([np.full((xs.shape[0], 1), u.x0), xs[:, :-1]], axis=1)
    if np.any(xs == lagged):
        raise FlatStep("the tree has an atom with x_t equal to x_{t-1}")

    model = build_utility_cost(u, tree.horizon)
    rep = solve_value(tree, model, bounds, tol=tol)
    actions = rep.policy.path_matrix(tree)
    w_leaf = u.payoff.value(xs) + np.sum(actions * (xs - lagged), axis=1)
    lp = u.loss.deriv(w_leaf)
    gpath = u.payoff.grad(xs)

    node_vals: dict[int, dict[int, float]] = {}
    leaves = tree.leaves
    for t in range(1, tree.horizon + 1):
        ce_lp = conditional_expectation(tree, {lf: float(lp[k]) for k, lf in enumerate(leaves)}, t)
        ce_lpg = conditional_expectation(
            tree, {lf: float(lp[k] * gpath[k, t - 1]) for k, lf in enumerate(leaves)}, t
        )
        vals: dict[int, float] = {}
        for nid in tree.levels[t]:
            a_next = rep.policy.values[nid] if t < tree.horizon else 0.0
            a_cur = rep.policy.values[tree.nodes[nid].parent]
            vals[nid] = (a_next - a_cur) * ce_lp[nid] - ce_lpg[nid]
        node_vals[t] = vals
    return _report_from_node_values(tree, node_vals, p, "utility"), rep.policy


def worst_case_direction(tree: ScenarioTree, report: SensitivityReport) -> WorstCaseDirection:
    """Adapted direction achieving equality in both Hoelder pairings.

    Stage weights a_t = u_t^(q/p) / (sum_s u_s^q)^(1/p) with u_t the stage
    L^q norm of the conditional gradients, and per node
    Z_t = a_t sign(G_t) |G_t|^(q-1) / u_t^(q-1) (zero on stages with u_t = 0).
    Then sum_t E|Z_t|^p = 1 and sum_t E[G_t Z_t] equals the first-order term.
    """
    p, q = report.p, report.q
    S = sum(report.stage_qnorms)
    if S <= 0.0:
        zeros = {t: {nid: 0.0 for nid in report.cond_grads[t]} for t in report.cond_grads}
        return WorstCaseDirection(
            p, q, zeros, tuple(0.0 for _ in report.stage_qnorms), 0.0, 0.0, True
        )
    u_stage = [qn ** (1.0 / q) for qn in report.stage_qnorms]
    weights = [ut ** (q / p) / S ** (1.0 / p) for ut in u_stage]
    values: dict[int, dict[int, float]] = {}
    norm_check = 0.0
    pairing = 0.0
    for t in range(1, tree.horizon + 1):
        vals: dict[int, float] = {}
        ut = u_stage[t - 1]
        for nid, g in report.cond_grads[t].items():
            if ut > 0.0 and g != 0.0:
                z = weights[t - 1] * math.copysign(abs(g) ** (q - 1.0), g) / ut ** (q - 1.0)
            else:
                z = 0.0
            vals[nid] = z
            norm_check += tree.node_prob[nid] * abs(z) ** p
            pairing += tree.node_prob[nid] * g * z
        values[t] = vals
    return WorstCaseDirection(p, q, values, tuple(weights), norm_check, pairing, False)


def perturbed_model(
    tree: ScenarioTree,
    direction: WorstCaseDirection,
    r: float,
    delta: float | None = None,
    verify: bool = True,
) -> ScenarioTree:
    """Shift node values along the direction: the law of X + r Z.

    The shift is node-wise, hence adapted; when shifted sibling values
    collide, the second marginal is bicausalized with resolution ``delta``
    (default r/100, so the repair cost is second order in r).  With
    ``verify`` the construction checks its own ball bound
    distance <= r * norm + delta * T^(1/p).
    """
    out, _coupling, _delta_used = perturbed_model_with_coupling(
        tree, direction, r, delta=delta, verify=verify
    )
    return out


def perturbed_model_with_coupling(
    tree: ScenarioTree,
    direction: WorstCaseDirection,
    r: float,
    delta: float | None = None,
    verify: bool = True,
):
    """Like :func:`perturbed_model` but also returns the displacement
    coupling (bicausal by construction) and the repair resolution used."""
    if r < 0.0:
        raise InvalidParams(f"radius must be nonnegative, got {r}")
    if r == 0.0:
        return tree, None, 0.0
    if delta is None:
        delta = r / 100.0
    T = tree.horizon
    shifted: dict[int, float] = {}
    for t in range(1, T + 1):
        zs = direction.values.get(t, {})
        for nid in tree.levels[t]:
            shifted[nid] = tree.nodes[nid].value + r * zs.get(nid, 0.0)

    collision = any(
        len({shifted[c] for c in tree.children[nid]}) != len(tree.children[nid])
        for t in range(T)
        for nid in tree.levels[t]
    )
    delta_used = 0.0
    if not collision:
        nodes = [
            Node(nd.id, nd.time, shifted[nd.id] if nd.parent is not None else None,
                 nd.cond_prob, nd.parent)
            for nd in tree.nodes
        ]
        out = ScenarioTree(T, nodes)
        pairs = [
            PairNode(nd.id, nd.time, nd.id, nd.id, nd.cond_prob, nd.parent)
            for nd in tree.nodes
        ]
        coupling = CouplingTree(tree, out, pairs)
    else:
        if delta <= 0.0:
            raise DeltaTooSmall(
                "shifted sibling values collide and delta = 0 leaves nothing to separate them"
            )
        parent = [nd.parent for nd in tree.nodes]
        times = [nd.time for nd in tree.nodes]
        x_node = list(range(len(tree.nodes)))
        y_value = [shifted.get(nd.id) for nd in tree.nodes]
        coupling, out = _bicausalize_pairs(
            tree, parent, times, x_node, y_value, list(tree.node_prob), delta
        )
        delta_used = delta

    if verify:
        norm = direction.norm_check ** (1.0 / direction.p) if direction.norm_check > 0 else 1.0
        bound = r * max(norm, 1.0) + delta_used * T ** (1.0 / direction.p) + 1e-9
        dist = aw_distance(tree, out, AWParams(direction.p)).distance
        if dist > bound:
            raise AwsensError(
                f"perturbed tree left its ball: distance {dist!r} exceeds bound {bound!r}"
            )
    return out, coupling, delta_used
