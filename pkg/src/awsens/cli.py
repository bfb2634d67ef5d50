"""Tree file schema, run configuration and the command-line surface.

Trees travel as JSON (schema "aw-tree/1"): tiny files whose diffability in
fixtures matters more than speed.  Floats are written with 17 significant
digits so parse(serialize(tree)) reproduces every node bit for bit.  All
commands are deterministic given the config seed; outputs are byte-stable
across runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from .adapted_wasserstein import AWParams, CouplingTree, aw_distance
from .cost_models import CostModel, catalog_names, make_cost_model
from .errors import AwsensError, InvalidParams, InvalidTree
from .multistage_opt import ControlBounds, solve_value
from .optimal_stopping import solve_stopping
from .process_tree import Node, ScenarioTree, gen_binomial, gen_lattice, gen_random
from .robust_oracle import RobustCurve, RobustQuery, robust_curve
from .sensitivity import (
    sensitivity_control,
    sensitivity_stopping,
    sensitivity_terminal,
    utility_first_order,
    worst_case_direction,
)

TREE_SCHEMA = "aw-tree/1"
THREADS_ENV = "AWSENS_THREADS"

# worker cap for module-level parallelism; computations are deterministic
# regardless of its value (reductions run in fixed order)
_thread_cap = 1


def get_thread_cap() -> int:
    return _thread_cap


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def serialize_tree(tree: ScenarioTree) -> str:
    lines = [
        "{",
        f'  "schema_version": "{TREE_SCHEMA}",',
        f'  "horizon": {tree.horizon},',
        '  "nodes": [',
    ]
    rows = []
    for nd in tree.nodes:
        parent = "null" if nd.parent is None else str(nd.parent)
        value = "null" if nd.value is None else _fmt(nd.value)
        rows.append(
            f'    {{"id": {nd.id}, "parent": {parent}, "time": {nd.time}, '
            f'"value": {value}, "cond_prob": {_fmt(nd.cond_prob)}}}'
        )
    lines.append(",\n".join(rows))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_tree(text: str) -> ScenarioTree:
    """Parse and validate a tree file, anchoring errors to node entries."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidTree(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise InvalidTree("top level must be an object")
    if doc.get("schema_version") != TREE_SCHEMA:
        raise InvalidTree(f'schema_version must be "{TREE_SCHEMA}"')
    horizon = doc.get("horizon")
    if not isinstance(horizon, int) or horizon < 1:
        raise InvalidTree(f"horizon must be a positive integer, got {horizon!r}")
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise InvalidTree("nodes must be a nonempty array")

    ids = {}
    for i, row in enumerate(raw_nodes):
        if not isinstance(row, dict) or "id" not in row:
            raise InvalidTree(f"nodes[{i}]: each node needs an id")
        label = row["id"]
        if label in ids:
            raise InvalidTree(f"nodes[{i}] (id={label!r}): duplicate id")
        ids[label] = i

    nodes = []
    for i, row in enumerate(raw_nodes):
        label = row["id"]
        where = f"nodes[{i}] (id={label!r})"
        parent = row.get("parent")
        if parent is not None:
            if parent not in ids:
                raise InvalidTree(f"{where}: unknown parent {parent!r}")
            parent = ids[parent]
        time = row.get("time")
        if not isinstance(time, int):
            raise InvalidTree(f"{where}: time must be an integer")
        value = row.get("value")
        if value is not None and not isinstance(value, (int, float)):
            raise InvalidTree(f"{where}: value must be a number or null")
        cond_prob = row.get("cond_prob", 1.0)
        if not isinstance(cond_prob, (int, float)):
            raise InvalidTree(f"{where}: cond_prob must be a number")
        nodes.append(Node(i, time, None if value is None else float(value),
                          float(cond_prob), parent))
    return ScenarioTree(horizon, nodes)


def load_tree(path: str) -> ScenarioTree:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise InvalidTree(f"{path}: {e}") from None
    try:
        return parse_tree(text)
    except InvalidTree as e:
        raise InvalidTree(f"{path}: {e}") from None


def save_tree(tree: ScenarioTree, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_tree(tree))


def serialize_coupling(coupling: CouplingTree) -> dict:
    return {
        "pair_nodes": [
            {
                "id": pn.id,
                "time": pn.time,
                "x_node": pn.x_node,
                "y_node": pn.y_node,
                "cond_prob": pn.cond_prob,
                "parent": pn.parent,
            }
            for pn in coupling.pair_nodes
        ]
    }


# -- run configuration ---------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    problem_class: str
    model_name: str
    model_params: dict
    p: float
    L: float = 10.0
    radii: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4)
    seed: int = 0
    value_tol: float = 1e-9
    stopping_tol: float = 1e-9
    restarts: int = 2
    max_iters: int = 25

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidParams("config must be a JSON object")
        for key in ("problem_class", "model", "p"):
            if key not in doc:
                raise InvalidParams(f"config is missing {key!r}")
        model = doc["model"]
        if not isinstance(model, dict) or "name" not in model:
            raise InvalidParams("config model must be an object with a name")
        if model["name"] not in catalog_names():
            raise InvalidParams(
                f"unknown model {model['name']!r}; catalog: {', '.join(catalog_names())}"
            )
        p = float(doc["p"])
        if not p > 1.0:
            raise InvalidParams(f"p must exceed 1, got {p}")
        tolerances = doc.get("tolerances", {})
        ascent = doc.get("ascent", {})
        return cls(
            problem_class=doc["problem_class"],
            model_name=model["name"],
            model_params=dict(model.get("params", {})),
            p=p,
            L=float(doc.get("bounds", {}).get("L", 10.0)),
            radii=tuple(float(r) for r in doc.get("radii", (1e-1, 1e-2, 1e-3, 1e-4))),
            seed=int(doc.get("seed", 0)),
            value_tol=float(tolerances.get("value_tol", 1e-9)),
            stopping_tol=float(tolerances.get("stopping_tol", 1e-9)),
            restarts=int(ascent.get("restarts", 2)),
            max_iters=int(ascent.get("max_iters", 25)),
        )

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise InvalidParams(f"{path}: {e}") from None
        except json.JSONDecodeError as e:
            raise InvalidParams(f"{path}: not valid JSON: {e}") from None
        return cls.from_dict(doc)

    def build_model(self, T: int) -> CostModel:
        return make_cost_model(self.model_name, self.model_params, T)


def _emit(payload: dict, out_path: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


# -- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    params = json.loads(args.params)
    if args.kind == "binomial":
        tree = gen_binomial(
            T=int(params["T"]),
            start=float(params.get("start", 0.0)),
            up=float(params.get("up", 1.0)),
            down=float(params.get("down", -1.0)),
            p_up=float(params.get("p_up", 0.5)),
            drift=float(params.get("drift", 0.0)),
        )
    elif args.kind == "lattice":
        tree = gen_lattice(
            T=int(params["T"]),
            start=float(params.get("start", 0.0)),
            steps=params["steps"],
            probs=params["probs"],
            drift=float(params.get("drift", 0.0)),
        )
    elif args.kind == "random":
        tree = gen_random(
            T=int(params["T"]),
            branching=int(params.get("branching", 2)),
            seed=int(params.get("seed", 0)),
        )
    else:
        raise InvalidParams(f"unknown generator kind {args.kind!r}")
    save_tree(tree, args.out)
    return 0


def cmd_aw(args) -> int:
    first = load_tree(args.tree_a)
    second = load_tree(args.tree_b)
    result = aw_distance(first, second, AWParams(args.p))
    payload = {
        "distance": result.distance,
        "pth_power": result.pth_power,
        "per_stage_costs": list(result.per_stage_costs),
        "p": args.p,
    }
    if args.coupling_out:
        with open(args.coupling_out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(serialize_coupling(result.coupling), sort_keys=True, indent=2) + "\n")
    _emit(payload, args.out)
    return 0


def cmd_value(args) -> int:
    tree = load_tree(args.tree)
    cfg = RunConfig.from_file(args.config)
    model = cfg.build_model(tree.horizon)
    report = solve_value(tree, model, ControlBounds(cfg.L), tol=cfg.value_tol)
    _emit(
        {
            "value": report.value,
            "kkt_residual": report.kkt_residual,
            "iterations": report.iterations,
            "policy": {str(k): v for k, v in sorted(report.policy.values.items())},
        },
        args.out,
    )
    return 0


def cmd_stop(args) -> int:
    tree = load_tree(args.tree)
    cfg = RunConfig.from_file(args.config)
    model = cfg.build_model(tree.horizon)
    value, policy, table = solve_stopping(tree, model, tol=cfg.stopping_tol)
    _emit(
        {
            "value": value,
            "stop_nodes": sorted(policy.stop_set),
            "tau": {str(k): v for k, v in sorted(policy.tau.items())},
            "uniqueness_margin": table.uniqueness_margin,
        },
        args.out,
    )
    return 0


def cmd_sens(args) -> int:
    tree = load_tree(args.tree)
    cfg = RunConfig.from_file(args.config)
    model = cfg.build_model(tree.horizon)
    if cfg.problem_class == "terminal":
        report = sensitivity_terminal(tree, model, cfg.p)
    elif cfg.problem_class == "controlled":
        if model.utility is not None:
            report, _ = utility_first_order(
                tree, model.utility, ControlBounds(cfg.L), cfg.p, tol=cfg.value_tol
            )
        else:
            report, _ = sensitivity_control(
                tree, model, ControlBounds(cfg.L), cfg.p, tol=cfg.value_tol
            )
    elif cfg.problem_class == "stopping":
        report, _ = sensitivity_stopping(tree, model, cfg.p, tol=cfg.stopping_tol)
    else:
        raise InvalidParams(f"unknown problem class {cfg.problem_class!r}")
    direction = worst_case_direction(tree, report)
    _emit(
        {
            "problem_class": report.problem_class,
            "p": report.p,
            "q": report.q,
            "first_order": report.first_order,
            "stage_qnorms": list(report.stage_qnorms),
            "cond_grads": {
                str(t): {str(n): v for n, v in sorted(vals.items())}
                for t, vals in report.cond_grads.items()
            },
            "direction": {
                "stage_weights": list(direction.stage_weights),
                "norm_check": direction.norm_check,
                "pairing": direction.pairing,
                "degenerate": direction.degenerate,
                "values": {
                    str(t): {str(n): v for n, v in sorted(vals.items())}
                    for t, vals in direction.values.items()
                },
            },
        },
        args.out,
    )
    return 0


def cmd_curve(args) -> int:
    tree = load_tree(args.tree)
    cfg = RunConfig.from_file(args.config)
    model = cfg.build_model(tree.horizon)
    query = RobustQuery(
        problem_class=cfg.problem_class,
        tree=tree,
        model=model,
        p=cfg.p,
        radii=cfg.radii,
        bounds=ControlBounds(cfg.L) if cfg.problem_class == "controlled" else None,
        restarts=cfg.restarts,
        max_iters=cfg.max_iters,
        seed=cfg.seed,
        solver_tol=cfg.value_tol,
    )
    curve: RobustCurve = robust_curve(query)
    with open(args.out_csv, "w", encoding="utf-8") as fh:
        fh.write(curve.to_csv())
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(curve.to_json_dict(), sort_keys=True, indent=2) + "\n")
    _emit(
        {
            "slope_estimate": curve.slope_estimate,
            "slope_stderr": curve.slope_stderr,
            "first_order": curve.first_order,
            "base_value": curve.base_value,
        },
        None,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awsens",
        description="Adapted-Wasserstein distances and model-risk sensitivities on scenario trees",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get(THREADS_ENV, "1")),
        help="cap on module-level worker counts (results do not depend on it)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="emit a generator tree as JSON")
    g.add_argument("--kind", required=True, choices=("binomial", "lattice", "random"))
    g.add_argument("--params", required=True, help="generator parameters as JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("aw", help="adapted distance between two tree files")
    a.add_argument("tree_a")
    a.add_argument("tree_b")
    a.add_argument("--p", type=float, default=2.0)
    a.add_argument("--out")
    a.add_argument("--coupling-out", dest="coupling_out")
    a.set_defaults(func=cmd_aw)

    v = sub.add_parser("value", help="multistage control value and optimal policy")
    v.add_argument("tree")
    v.add_argument("--config", required=True)
    v.add_argument("--out")
    v.set_defaults(func=cmd_value)

    s = sub.add_parser("stop", help="optimal stopping value and policy")
    s.add_argument("tree")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stop)

    se = sub.add_parser("sens", help="first-order sensitivity and worst-case direction")
    se.add_argument("tree")
    se.add_argument("--config", required=True)
    se.add_argument("--out")
    se.set_defaults(func=cmd_sens)

    c = sub.add_parser("curve", help="robust lower-bound curve over a radius grid")
    c.add_argument("tree")
    c.add_argument("--config", required=True)
    c.add_argument("--out-csv", dest="out_csv", required=True)
    c.add_argument("--out-json", dest="out_json")
    c.set_defaults(func=cmd_curve)
    return parser


def main(argv: list[str] | None = None) -> int:
    global _thread_cap
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    _thread_cap = args.threads
    try:
        return args.func(args)
    except AwsensError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
