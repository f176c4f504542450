"""Finite scenario trees for a two-asset market with proportional transaction costs.

The bond is the numeraire (price 1). The stock is bought at the ask ``S_n`` and
sold at the bid ``(1 - lambda) * S_n``. Trees are path-distinct: every node has a
single parent, so the information available at a node is exactly the node
itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PROB_TOL = 1e-12
MAX_BINOMIAL_STEPS = 12


class TreeError(ValueError):
    """Raised when a tree or endowment document is malformed."""


@dataclass(frozen=True)
class Node:
    id: str
    time_index: int
    parent_id: str | None
    price: float
    prob: float  # conditional probability of reaching this node from its parent

    def __post_init__(self) -> None:
        if not (self.price > 0.0 and math.isfinite(self.price)):
            raise TreeError(f"node {self.id!r}: price must be positive, got {self.price!r}")
        if not (0.0 < self.prob <= 1.0):
            raise TreeError(f"node {self.id!r}: prob must lie in (0, 1], got {self.prob!r}")


@dataclass(frozen=True)
class ScenarioTree:
    nodes: tuple[Node, ...]
    horizon_steps: int
    lam: float
    root_id: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not (0.0 < self.lam < 1.0):
            raise TreeError(f"lambda must lie in (0, 1), got {self.lam!r}")
        if self.horizon_steps < 1:
            raise TreeError("horizon must be ≥ 1")

        by_id: dict[str, Node] = {}
        for node in self.nodes:
            if node.id in by_id:
                raise TreeError(f"duplicate node id {node.id!r}")
            by_id[node.id] = node
        roots = [n for n in self.nodes if n.parent_id is None]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        root = roots[0]
        if root.time_index != 0:
            raise TreeError("root must sit at time index 0")
        object.__setattr__(self, "root_id", root.id)

        children: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for node in self.nodes:
            if node.parent_id is None:
                continue
            parent = by_id.get(node.parent_id)
            if parent is None:
                raise TreeError(f"orphan node {node.id!r}: unknown parent {node.parent_id!r}")
            if node.time_index != parent.time_index + 1:
                raise TreeError(f"node {node.id!r}: time index must be parent's + 1")
            children[parent.id].append(node.id)

        for nid, kids in children.items():
            if not kids:
                if by_id[nid].time_index != self.horizon_steps:
                    raise TreeError(
                        f"leaf {nid!r} at time {by_id[nid].time_index}, "
                        f"expected horizon {self.horizon_steps}"
                    )
                continue
            total = math.fsum(by_id[k].prob for k in kids)
            if abs(total - 1.0) > PROB_TOL:
                raise TreeError(f"probabilities sum to {total:.12g} at node {nid!r}")

        # reachability: every node must descend from the root (catches parent cycles)
        seen = {root.id}
        stack = [root.id]
        while stack:
            for k in children[stack.pop()]:
                seen.add(k)
                stack.append(k)
        if len(seen) != len(self.nodes):
            raise TreeError("some nodes are not reachable from the root")

        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_children", {k: tuple(v) for k, v in children.items()})

    # -- lookups ---------------------------------------------------------
    def node(self, node_id: str) -> Node:
        try:
            return self._by_id[node_id]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._by_id  # type: ignore[attr-defined]

    def children(self, node_id: str) -> tuple[str, ...]:
        self.node(node_id)
        return self._children[node_id]  # type: ignore[attr-defined]

    def is_leaf(self, node_id: str) -> bool:
        return not self.children(node_id)

    def price(self, node_id: str) -> float:
        return self.node(node_id).price

    @cached_property
    def leaves(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if not self._children[n.id])  # type: ignore[attr-defined]

    @cached_property
    def internal(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if self._children[n.id])  # type: ignore[attr-defined]

    def subtree(self, node_id: str) -> list[str]:
        """Node ids of the subtree rooted at ``node_id`` in pre-order."""
        out = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.children(nid)))
        return out

    def path_from_root(self, node_id: str) -> list[str]:
        path = []
        cur: str | None = node_id
        while cur is not None:
            path.append(cur)
            cur = self.node(cur).parent_id
        return path[::-1]

    @cached_property
    def unconditional_prob(self) -> dict[str, float]:
        """P(node) as the product of conditional probabilities along the root path."""
        out = {self.root_id: 1.0}
        for nid in self.subtree(self.root_id):
            for k in self._children[nid]:  # type: ignore[attr-defined]
                out[k] = out[nid] * self._by_id[k].prob  # type: ignore[attr-defined]
        return out

    def conditional_prob(self, ancestor: str, node_id: str) -> float:
        """P(node | ancestor); ``ancestor`` must lie on the root path of ``node_id``."""
        p = 1.0
        cur = node_id
        while cur != ancestor:
            n = self.node(cur)
            if n.parent_id is None:
                raise KeyError(f"{ancestor!r} is not an ancestor of {node_id!r}")
            p *= n.prob
            cur = n.parent_id
        return p

    # -- serialization ---------------------------------------------------
    def to_document(self) -> dict:
        return {
            "lambda": self.lam,
            "horizon_steps": self.horizon_steps,
            "nodes": [
                {"id": n.id, "parent": n.parent_id, "t": n.time_index, "price": n.price, "prob": n.prob}
                for n in self.nodes
            ],
        }

    def with_lambda(self, lam: float) -> "ScenarioTree":
        return ScenarioTree(self.nodes, self.horizon_steps, lam)


@dataclass(frozen=True)
class EndowmentSpec:
    x: float
    e_leaf: Mapping[str, float]

    def __post_init__(self) -> None:
        if not (self.x > 0.0 and math.isfinite(self.x)):
            raise TreeError(f"initial wealth x must be positive, got {self.x!r}")
        object.__setattr__(self, "e_leaf", dict(self.e_leaf))

    def e(self, leaf_id: str) -> float:
        return float(self.e_leaf.get(leaf_id, 0.0))

    def check_against(self, tree: ScenarioTree, *, allow_negative: bool = False) -> None:
        leaves = set(tree.leaves)
        for k, v in self.e_leaf.items():
            if k not in leaves:
                raise TreeError(f"endowment given for non-leaf or unknown node {k!r}")
            if not math.isfinite(v):
                raise TreeError(f"endowment at {k!r} is not finite")
            if v < 0.0 and not allow_negative:
                raise TreeError(f"endowment at {k!r} is negative ({v!r}); terminal endowment must be >= 0")

    def scaled(self, x: float) -> "EndowmentSpec":
        return EndowmentSpec(x, self.e_leaf)

    def to_document(self) -> dict:
        return {"x": self.x, "e": dict(self.e_leaf)}


def tree_from_document(doc: Mapping) -> ScenarioTree:
    try:
        lam = float(doc["lambda"])
        horizon = int(doc["horizon_steps"])
        raw_nodes = doc["nodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TreeError(f"tree document missing or invalid field: {exc}") from None
    if not isinstance(raw_nodes, Sequence) or isinstance(raw_nodes, (str, bytes)):
        raise TreeError("'nodes' must be a list")
    nodes = []
    for raw in raw_nodes:
        try:
            parent = raw["parent"]
            nodes.append(
                Node(
                    id=str(raw["id"]),
                    time_index=int(raw["t"]),
                    parent_id=None if parent is None else str(parent),
                    price=float(raw["price"]),
                    prob=float(raw["prob"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TreeError(f"invalid node entry {raw!r}: {exc}") from None
    if horizon < 1 or len(nodes) <= 1:
        raise TreeError("horizon must be ≥ 1")
    return ScenarioTree(tuple(nodes), horizon, lam)


def load_tree(source: str | Path | Mapping) -> ScenarioTree:
    """Load and validate a tree from a JSON path, JSON text, or parsed mapping."""
    if isinstance(source, Mapping):
        return tree_from_document(source)
    text = Path(source).read_text() if _looks_like_path(source) else str(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeError(f"tree document is not valid JSON: {exc}") from None
    return tree_from_document(doc)


def dump_tree(tree: ScenarioTree) -> str:
    return json.dumps(tree.to_document(), indent=1)


def endowment_from_document(doc: Mapping) -> EndowmentSpec:
    try:
        x = float(doc["x"])
        e = {str(k): float(v) for k, v in (doc.get("e") or {}).items()}
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise TreeError(f"invalid endowment document: {exc}") from None
    return EndowmentSpec(x, e)


def load_endowment(source: str | Path | Mapping) -> EndowmentSpec:
    if isinstance(source, Mapping):
        return endowment_from_document(source)
    text = Path(source).read_text() if _looks_like_path(source) else str(source)
    return endowment_from_document(json.loads(text))


def _looks_like_path(source: str | Path) -> bool:
    if isinstance(source, Path):
        return True
    return not source.lstrip().startswith("{")


def build_lattice(
    s0: float,
    factors: Sequence[float],
    probs: Sequence[float],
    steps: int,
    lam: float,
    *,
    max_steps: int | None = None,
) -> ScenarioTree:
    """Path-distinct multinomial tree: each node branches into ``len(factors)`` children.

    Child ``j`` of a node priced ``S`` is priced ``S * factors[j]`` with conditional
    probability ``probs[j]``. Node ids encode the branch sequence, e.g. ``"r.0.1"``.
    """
    if len(factors) != len(probs) or not factors:
        raise TreeError("factors and probs must be non-empty and of equal length")
    if max_steps is not None and steps > max_steps:
        raise TreeError(f"steps={steps} exceeds the limit of {max_steps}")
    if steps < 1:
        raise TreeError("horizon must be ≥ 1")
    nodes = [Node("r", 0, None, float(s0), 1.0)]
    frontier = [nodes[0]]
    for t in range(1, steps + 1):
        nxt = []
        for parent in frontier:
            for j, (f, p) in enumerate(zip(factors, probs)):
                child = Node(f"{parent.id}.{j}", t, parent.id, parent.price * f, float(p))
                nodes.append(child)
                nxt.append(child)
        frontier = nxt
    return ScenarioTree(tuple(nodes), steps, lam)


def build_binomial(s0: float, up: float, down: float, p_up: float, steps: int, lam: float) -> ScenarioTree:
    if not up > 1.0:
        raise TreeError("up factor must exceed 1")
    if not 0.0 < down < 1.0:
        raise TreeError("down factor must lie in (0, 1)")
    if not 0.0 < p_up < 1.0:
        raise TreeError("p_up must lie in (0, 1)")
    if steps > MAX_BINOMIAL_STEPS:
        raise TreeError(f"steps={steps} exceeds the limit of {MAX_BINOMIAL_STEPS} (2^steps leaves)")
    return build_lattice(s0, (up, down), (p_up, 1.0 - p_up), steps, lam)


def random_tree(
    rng: np.random.Generator,
    steps: int,
    lam: float,
    *,
    max_branch: int = 3,
    s0: float = 1.0,
    vol: float = 0.2,
) -> ScenarioTree:
    """Path-distinct tree with random branching, log-returns and transition probabilities."""
    if steps < 1:
        raise TreeError("horizon must be ≥ 1")
    nodes = [Node("r", 0, None, float(s0), 1.0)]
    frontier = [nodes[0]]
    for t in range(1, steps + 1):
        nxt = []
        for parent in frontier:
            k = int(rng.integers(2, max_branch + 1))
            rets = np.sort(rng.normal(0.0, vol, size=k))
            probs = rng.dirichlet(np.full(k, 2.0))
            probs = np.maximum(probs, 0.02)
            probs /= probs.sum()
            probs[-1] = 1.0 - math.fsum(probs[:-1])
            for j in range(k):
                child = Node(f"{parent.id}.{j}", t, parent.id, parent.price * math.exp(rets[j]), float(probs[j]))
                nodes.append(child)
                nxt.append(child)
        frontier = nxt
    return ScenarioTree(tuple(nodes), steps, lam)


def bid_ask(tree: ScenarioTree, node_id: str) -> tuple[float, float]:
    s = tree.price(node_id)
    return (1.0 - tree.lam) * s, s


def total_leaf_probability(tree: ScenarioTree) -> float:
    return math.fsum(tree.unconditional_prob[leaf] for leaf in tree.leaves)


def leaf_endowment(tree: ScenarioTree, values: Iterable[float], x: float) -> EndowmentSpec:
    """Convenience constructor pairing leaf values in tree order with ``x``."""
    return EndowmentSpec(x, dict(zip(tree.leaves, (float(v) for v in values))))
