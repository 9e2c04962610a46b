"""Finite scenario trees carrying two equivalent measures.

A tree holds one node per (date, state) with P- and Q-transition
probabilities on the edge into each node.  Dates run 0..n with a single
root at date 0 and all leaves at date n.  The filtration is the tree
structure itself: an adapted process is one real value per node, and
conditional expectations are probability-weighted backward sweeps.
"""
from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator

__all__ = [
    "TreeError",
    "ScenarioTree",
    "AdaptedProcess",
    "StoppingTime",
    "build_tree",
    "conditional_expectation",
    "density_process",
    "is_Q_supermartingale",
    "SupermartingaleReport",
    "count_stopping_times",
    "enumerate_stopping_times",
    "is_stopping_time",
]

DEFAULT_TOL = 1e-9


class TreeError(ValueError):
    """Structural or probabilistic invariant of a scenario tree is violated."""


@dataclass(frozen=True)
class _Node:
    id: str
    date: int
    parent: str | None
    p: float  # P-transition probability of the edge into this node (1 at root)
    q: float  # Q-transition probability of the edge into this node (1 at root)


class ScenarioTree:
    """Validated finite tree with strictly positive transition probabilities.

    Strict positivity of every p and q encodes equivalence of the two
    measures; children probabilities must sum to one under each measure.
    """

    def __init__(self, n_dates: int, nodes: list[_Node]):
        self.n_dates = n_dates
        self._nodes = {nd.id: nd for nd in nodes}
        self._children: dict[str, list[str]] = {nd.id: [] for nd in nodes}
        self._by_date: dict[int, list[str]] = {k: [] for k in range(n_dates + 1)}
        for nd in nodes:
            if nd.parent is not None:
                self._children[nd.parent].append(nd.id)
            self._by_date.setdefault(nd.date, []).append(nd.id)
        self._validate()
        self._prob_p = self._accumulate("p")
        self._prob_q = self._accumulate("q")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, spec: Mapping) -> "ScenarioTree":
        """Build from ``{"dates": n, "nodes": [{"id","date","parent","p","q"}...]}``."""
        try:
            n = int(spec["dates"])
            raw = spec["nodes"]
        except (KeyError, TypeError) as exc:
            raise TreeError(f"tree spec missing field: {exc}") from exc
        if n < 1:
            raise TreeError("tree needs at least one payment date")
        nodes = []
        for item in raw:
            try:
                parent = item["parent"]
                nodes.append(
                    _Node(
                        id=str(item["id"]),
                        date=int(item["date"]),
                        parent=None if parent is None else str(parent),
                        p=float(item.get("p", 1.0)),
                        q=float(item.get("q", 1.0)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TreeError(f"bad node record {item!r}: {exc}") from exc
        return cls(n, nodes)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioTree":
        return cls.from_dict(json.loads(text))

    def _validate(self) -> None:
        roots = [nd for nd in self._nodes.values() if nd.parent is None]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        root = roots[0]
        if root.date != 0:
            raise TreeError("root must sit at date 0")
        self._root = root.id
        for nd in self._nodes.values():
            if nd.parent is None:
                continue
            parent = self._nodes.get(nd.parent)
            if parent is None:
                raise TreeError(f"orphan node {nd.id!r}: parent {nd.parent!r} unknown")
            if parent.date != nd.date - 1:
                raise TreeError(
                    f"node {nd.id!r} at date {nd.date} has parent at date {parent.date}"
                )
            if nd.date > self.n_dates:
                raise TreeError(f"node {nd.id!r} beyond final date {self.n_dates}")
            if not (nd.p > 0.0) or not (nd.q > 0.0):
                raise TreeError(
                    f"node {nd.id!r}: transition probabilities must be strictly "
                    f"positive (p={nd.p}, q={nd.q}); zero would break equivalence"
                )
        for nid, kids in self._children.items():
            date = self._nodes[nid].date
            if not kids:
                if date != self.n_dates:
                    raise TreeError(f"leaf {nid!r} at date {date}, not {self.n_dates}")
                continue
            sp = math.fsum(self._nodes[c].p for c in kids)
            sq = math.fsum(self._nodes[c].q for c in kids)
            if abs(sp - 1.0) > 1e-9:
                raise TreeError(f"P-transition does not sum to 1 at node {nid!r} ({sp})")
            if abs(sq - 1.0) > 1e-9:
                raise TreeError(f"Q-transition does not sum to 1 at node {nid!r} ({sq})")

    def _accumulate(self, attr: str) -> dict[str, float]:
        out: dict[str, float] = {}
        for k in range(self.n_dates + 1):
            for nid in self.date_nodes(k):
                nd = self._nodes[nid]
                w = getattr(nd, attr)
                out[nid] = w if nd.parent is None else out[nd.parent] * w
        return out

    # -- structure --------------------------------------------------------

    @property
    def root(self) -> str:
        return self._root

    def node_ids(self) -> list[str]:
        return list(self._nodes)

    def date_nodes(self, k: int) -> list[str]:
        if k < 0 or k > self.n_dates:
            raise TreeError(f"date {k} out of range 0..{self.n_dates}")
        return list(self._by_date[k])

    @property
    def leaves(self) -> list[str]:
        return self.date_nodes(self.n_dates)

    def children(self, node_id: str) -> list[str]:
        return list(self._children[node_id])

    def parent(self, node_id: str) -> str | None:
        return self._nodes[node_id].parent

    def date_of(self, node_id: str) -> int:
        return self._nodes[node_id].date

    def trans_p(self, node_id: str) -> float:
        return self._nodes[node_id].p

    def trans_q(self, node_id: str) -> float:
        return self._nodes[node_id].q

    def trans(self, node_id: str, measure: str) -> float:
        nd = self._nodes[node_id]
        if measure == "P":
            return nd.p
        if measure == "Q":
            return nd.q
        raise TreeError(f"measure must be 'P' or 'Q', got {measure!r}")

    def prob(self, node_id: str, measure: str = "P") -> float:
        """Unconditional probability of the sub-tree atom rooted at the node."""
        return (self._prob_p if measure == "P" else self._prob_q)[node_id]

    def path(self, leaf_id: str) -> list[str]:
        """Node ids from the root down to ``leaf_id`` inclusive."""
        out = [leaf_id]
        cur = self._nodes[leaf_id]
        while cur.parent is not None:
            out.append(cur.parent)
            cur = self._nodes[cur.parent]
        out.reverse()
        return out

    def ancestor(self, node_id: str, k: int) -> str:
        nd = self._nodes[node_id]
        if k > nd.date:
            raise TreeError(f"node {node_id!r} at date {nd.date} has no date-{k} ancestor")
        while nd.date > k:
            nd = self._nodes[nd.parent]
        return nd.id

    def measures_equal(self, tol: float = DEFAULT_TOL) -> bool:
        return all(abs(nd.p - nd.q) <= tol for nd in self._nodes.values())

    def to_dict(self) -> dict:
        return {
            "dates": self.n_dates,
            "nodes": [
                {"id": nd.id, "date": nd.date, "parent": nd.parent, "p": nd.p, "q": nd.q}
                for nd in self._nodes.values()
            ],
        }

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def __repr__(self) -> str:
        return f"ScenarioTree(dates={self.n_dates}, nodes={len(self._nodes)})"


def build_tree(spec: Mapping) -> ScenarioTree:
    """Validate and build a :class:`ScenarioTree` from its dict description."""
    return ScenarioTree.from_dict(spec)


@dataclass(frozen=True)
class AdaptedProcess(Mapping):
    """One real value per node; adaptedness is structural (keyed by node id)."""

    values: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, node_id: str) -> float:
        return self.values[node_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def dates(self, tree: ScenarioTree) -> list[int]:
        return sorted({tree.date_of(n) for n in self.values})

    def slice_at(self, tree: ScenarioTree, k: int) -> dict[str, float]:
        return {n: v for n, v in self.values.items() if tree.date_of(n) == k}


def _as_values(process: Mapping) -> Mapping[str, float]:
    return process.values if isinstance(process, AdaptedProcess) else process


def conditional_expectation(
    tree: ScenarioTree,
    process: Mapping,
    measure: str = "P",
    k: int = 0,
    from_date: int | None = None,
) -> AdaptedProcess:
    """E[process_j | F_k] as a date-k process, j defaulting to the latest
    date the process fully covers.  Computed by backward probability-weighted
    averaging under the requested measure."""
    vals = _as_values(process)
    if from_date is None:
        covered = [
            j
            for j in range(tree.n_dates + 1)
            if all(n in vals for n in tree.date_nodes(j))
        ]
        if not covered:
            raise TreeError("process does not cover any full date slice")
        from_date = max(covered)
    if not 0 <= k <= from_date <= tree.n_dates:
        raise TreeError(f"need 0 <= k <= from_date <= {tree.n_dates}, got k={k}, from={from_date}")
    cur = {n: float(vals[n]) for n in tree.date_nodes(from_date)}
    for j in range(from_date, k, -1):
        nxt = {}
        for u in tree.date_nodes(j - 1):
            nxt[u] = math.fsum(tree.trans(c, measure) * cur[c] for c in tree.children(u))
        cur = nxt
    return AdaptedProcess(cur)


def density_process(tree: ScenarioTree) -> AdaptedProcess:
    """Conditional density of Q w.r.t. P at every node: the running product of
    one-step q/p ratios along the path.  P-martingale with value 1 at the root."""
    z: dict[str, float] = {tree.root: 1.0}
    for k in range(1, tree.n_dates + 1):
        for nid in tree.date_nodes(k):
            z[nid] = z[tree.parent(nid)] * tree.trans_q(nid) / tree.trans_p(nid)
    return AdaptedProcess(z)


@dataclass(frozen=True)
class SupermartingaleReport:
    ok: bool
    violations: list  # (node_id, conditional_expectation, level)

    def __bool__(self) -> bool:
        return self.ok


def is_Q_supermartingale(
    tree: ScenarioTree, M: Mapping, tol: float = DEFAULT_TOL
) -> SupermartingaleReport:
    """Check E_Q[M_{k+1} | F_k] <= M_k + tol at every non-leaf node."""
    vals = _as_values(M)
    violations = []
    for k in range(tree.n_dates):
        for u in tree.date_nodes(k):
            ce = math.fsum(tree.trans_q(c) * vals[c] for c in tree.children(u))
            if ce > vals[u] + tol:
                violations.append((u, ce, vals[u]))
    return SupermartingaleReport(not violations, violations)


@dataclass(frozen=True)
class StoppingTime(Mapping):
    """Stop date per leaf path, measurable w.r.t. the tree filtration."""

    stop_dates: dict[str, int]

    def __getitem__(self, leaf_id: str) -> int:
        return self.stop_dates[leaf_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self.stop_dates)

    def __len__(self) -> int:
        return len(self.stop_dates)

    def __le__(self, other: "StoppingTime") -> bool:
        return all(self.stop_dates[leaf] <= other.stop_dates[leaf] for leaf in self.stop_dates)


def is_stopping_time(tree: ScenarioTree, stop_dates: Mapping[str, int]) -> bool:
    """True iff the leaf labelling is a bona fide stopping time: the event
    {stop <= k} must be decidable from the date-k ancestor."""
    leaves = tree.leaves
    if set(stop_dates) != set(leaves):
        return False
    if any(not 0 <= stop_dates[leaf] <= tree.n_dates for leaf in leaves):
        return False
    for k in range(tree.n_dates):
        for u in tree.date_nodes(k):
            under = [leaf for leaf in leaves if tree.ancestor(leaf, k) == u]
            flags = {stop_dates[leaf] <= k for leaf in under}
            if len(flags) > 1:
                return False
    return True


def count_stopping_times(tree: ScenarioTree) -> int:
    """Number of stopping times valued in 0..n, without materializing them."""

    def rec(node: str) -> int:
        kids = tree.children(node)
        if not kids:
            return 1
        prod = 1
        for c in kids:
            prod *= rec(c)
        return 1 + prod

    return rec(tree.root)


def enumerate_stopping_times(
    tree: ScenarioTree, max_count: int = 100_000
) -> list[StoppingTime]:
    """Exhaustive list of stopping times; refuses trees whose count exceeds
    ``max_count`` (the count is computed first, cheaply)."""
    total = count_stopping_times(tree)
    if total > max_count:
        raise TreeError(f"{total} stopping times exceeds cap {max_count}")

    def leaves_under(node: str) -> list[str]:
        return [leaf for leaf in tree.leaves if tree.ancestor(leaf, tree.date_of(node)) == node]

    def rec(node: str) -> list[dict[str, int]]:
        date = tree.date_of(node)
        stop_here = {leaf: date for leaf in leaves_under(node)}
        kids = tree.children(node)
        if not kids:
            return [stop_here]
        out = [stop_here]
        partial: list[dict[str, int]] = [{}]
        for c in kids:
            partial = [dict(acc, **opt) for acc in partial for opt in rec(c)]
        out.extend(partial)
        return out

    return [StoppingTime(d) for d in rec(tree.root)]
