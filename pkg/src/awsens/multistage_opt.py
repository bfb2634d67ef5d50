"""Convex multistage control on a scenario tree over box-bounded predictable
controls.

Predictability is structural: one scalar control lives on each non-leaf node
and applies to the step leaving it, so the control acting over (t-1, t]
depends only on the history up to t-1 (the root's control is deterministic).
The resulting finite convex program is solved by projected gradient with a
Barzilai-Borwein initial step and Armijo backtracking along the projected
arc.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost_models import CostModel, sampled_hessian_min_eig
from .errors import InvalidParams, MaxIterations, NotConvex, TooLarge
from .process_tree import ScenarioTree

ARMIJO_C = 1e-4
BACKTRACK = 0.5
MAX_ITER_DEFAULT = 100_000
BRUTE_FORCE_MAX_POINTS = 1_000_000


@dataclass(frozen=True)
class ControlBounds:
    """Box half-width: admissible controls lie in [-L, L]."""

    L: float

    def __post_init__(self):
        if not (self.L > 0 and np.isfinite(self.L)):
            raise InvalidParams(f"control bound must be positive and finite, got {self.L}")


@dataclass(frozen=True)
class ControlPolicy:
    """Control values keyed by the non-leaf node they are attached to."""

    values: dict[int, float]

    def path_matrix(self, tree: ScenarioTree) -> np.ndarray:
        """(n_paths, T) matrix: entry (k, t-1) is the control applied over (t-1, t]."""
        anc = tree.ancestor_matrix
        out = np.empty((anc.shape[0], tree.horizon))
        for t in range(tree.horizon):
            out[:, t] = [self.values[int(n)] for n in anc[:, t]]
        return out


@dataclass(frozen=True)
class ValueReport:
    value: float
    policy: ControlPolicy
    kkt_residual: float
    iterations: int


def _variable_layout(tree: ScenarioTree):
    """Non-leaf nodes in level order and the per-path variable index matrix."""
    ids = [nid for t in range(tree.horizon) for nid in tree.levels[t]]
    pos = {nid: k for k, nid in enumerate(ids)}
    anc = tree.ancestor_matrix[:, : tree.horizon]
    aidx = np.vectorize(pos.__getitem__, otypes=[np.int64])(anc)
    return ids, aidx


def _check_convex(tree: ScenarioTree, model: CostModel, bounds: ControlBounds, seed: int = 0):
    rng = np.random.default_rng(seed)
    xs = tree.paths.values
    rows = xs[rng.integers(0, xs.shape[0], size=32)]
    controls = rng.uniform(-bounds.L, bounds.L, size=rows.shape)
    if sampled_hessian_min_eig(model, rows, controls) < -1e-10:
        raise NotConvex(f"model {model.name!r} fails the sampled-Hessian convexity check")


def solve_value(
    tree: ScenarioTree,
    model: CostModel,
    bounds: ControlBounds,
    tol: float = 1e-9,
    max_iter: int = MAX_ITER_DEFAULT,
    z0: np.ndarray | None = None,
    check_convexity: bool = True,
) -> ValueReport:
    """Minimize the expected cost over box-bounded node controls.

    Terminates when the projected-gradient sup-norm falls below ``tol``;
    raises MaxIterations otherwise.
    """
    if model.kind != "controlled":
        raise InvalidParams(f"solve_value needs a controlled model, got {model.kind!r}")
    if check_convexity:
        _check_convex(tree, model, bounds)
    ids, aidx = _variable_layout(tree)
    xs = tree.paths.values
    w = tree.paths.probs
    L = bounds.L
    nvar = len(ids)

    def phi_and_grad(z: np.ndarray):
        actions = z[aidx]
        phi = float(w @ model.value_fn(xs, actions))
        grads = model.grad_a_fn(xs, actions)
        g = np.zeros(nvar)
        np.add.at(g, aidx, w[:, None] * grads)
        return phi, g

    def phi_only(z: np.ndarray) -> float:
        return float(w @ model.value_fn(xs, z[aidx]))

    z = np.clip(np.zeros(nvar) if z0 is None else np.asarray(z0, float).copy(), -L, L)
    phi, g = phi_and_grad(z)
    step = 1.0 / max(1.0, float(np.max(np.abs(g))))
    z_prev = g_prev = None
    for it in range(1, max_iter + 1):
        residual = float(np.max(np.abs(z - np.clip(z - g, -L, L))))
        if residual <= tol:
            return ValueReport(
                value=phi,
                policy=ControlPolicy({nid: float(z[k]) for k, nid in enumerate(ids)}),
                kkt_residual=residual,
                iterations=it - 1,
            )
        if z_prev is not None:
            dz = z - z_prev
            dg = g - g_prev
            curv = float(dz @ dg)
            step = float(dz @ dz) / curv if curv > 1e-18 else min(step * 2.0, 1e8)
            step = float(np.clip(step, 1e-12, 1e8))
        # Armijo along the projected arc; the noise-floor term keeps the test
        # meaningful once objective differences shrink below float resolution
        noise = 1e-15 * (1.0 + abs(phi))
        s = step
        for _ in range(60):
            z_new = np.clip(z - s * g, -L, L)
            phi_new = phi_only(z_new)
            if phi_new <= phi + ARMIJO_C * float(g @ (z_new - z)) + noise:
                break
            s *= BACKTRACK
        z_prev, g_prev = z, g
        z = z_new
        phi, g = phi_and_grad(z)
    raise MaxIterations(f"projected gradient did not reach tolerance {tol} in {max_iter} iterations")


def brute_force_value(
    tree: ScenarioTree, model: CostModel, bounds: ControlBounds, grid_n: int
) -> float:
    """Exhaustive minimum over a uniform control grid; upper-bounds the value."""
    if model.kind != "controlled":
        raise InvalidParams(f"brute_force_value needs a controlled model, got {model.kind!r}")
    if grid_n < 2:
        raise InvalidParams(f"grid_n must be >= 2, got {grid_n}")
    ids, aidx = _variable_layout(tree)
    nvar = len(ids)
    if grid_n**nvar > BRUTE_FORCE_MAX_POINTS:
        raise TooLarge(f"{grid_n}^{nvar} grid points exceed {BRUTE_FORCE_MAX_POINTS}")
    grid = np.linspace(-bounds.L, bounds.L, grid_n)
    combos = np.stack(
        np.meshgrid(*([grid] * nvar), indexing="ij"), axis=-1
    ).reshape(-1, nvar)
    xs = tree.paths.values
    w = tree.paths.probs
    total = np.zeros(combos.shape[0])
    for k in range(xs.shape[0]):
        actions = combos[:, aidx[k]]
        xrow = np.broadcast_to(xs[k], actions.shape)
        total += w[k] * model.value_fn(xrow, actions)
    return float(total.min())


def objective_hessian(tree: ScenarioTree, model: CostModel, policy_vec: np.ndarray) -> np.ndarray:
    """Hessian of the expected cost in node-control space at the given point."""
    ids, aidx = _variable_layout(tree)
    xs = tree.paths.values
    w = tree.paths.probs
    hess = model.hess_a(xs, policy_vec[aidx])
    H = np.zeros((len(ids), len(ids)))
    for k in range(xs.shape[0]):
        rows = aidx[k]
        for ti, vi in enumerate(rows):
            for tj, vj in enumerate(rows):
                H[vi, vj] += w[k] * hess[k, ti, tj]
    return H


def strong_convexity_probe(
    tree: ScenarioTree, model: CostModel, bounds: ControlBounds, samples: int = 8, seed: int = 0
) -> float:
    """Smallest objective-Hessian eigenvalue over random feasible controls."""
    ids, _ = _variable_layout(tree)
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(samples):
        z = rng.uniform(-bounds.L, bounds.L, size=len(ids))
        worst = min(worst, float(np.linalg.eigvalsh(objective_hessian(tree, model, z)).min()))
    return worst


def uniqueness_spread(
    tree: ScenarioTree,
    model: CostModel,
    bounds: ControlBounds,
    tol: float = 1e-9,
    restarts: int = 16,
    seed: int = 0,
) -> float:
    """Max sup-norm spread of the optimizers found from random starts."""
    rng = np.random.default_rng(seed)
    ids, _ = _variable_layout(tree)
    sols = []
    for _ in range(restarts):
        z0 = rng.uniform(-bounds.L, bounds.L, size=len(ids))
        rep = solve_value(tree, model, bounds, tol=tol, z0=z0, check_convexity=False)
        sols.append(np.array([rep.policy.values[nid] for nid in ids]))
    stack = np.stack(sols)
    return float(np.max(stack.max(axis=0) - stack.min(axis=0)))


def control_grid_error_bound(
    tree: ScenarioTree, model: CostModel, bounds: ControlBounds,
    policy_vec: np.ndarray, grid_n: int,
) -> float:
    """Curvature bound on the gap between the grid minimum and the true one.

    The nearest grid point sits within half a grid cell of the optimum per
    coordinate, so for objectives whose control Hessian does not depend on
    the control (all quadratic-in-a catalog entries) the excess cost is at
    most lambda_max/2 times the squared distance.
    """
    h = 2.0 * bounds.L / (grid_n - 1)
    H = objective_hessian(tree, model, policy_vec)
    lam = float(np.linalg.eigvalsh(H).max())
    n = H.shape[0]
    return 0.5 * lam * n * (0.5 * h) ** 2 + 1e-12
