"""Hedge problem container, feasibility checks, and the stopping-time test.

A problem is a scenario tree, per-date payment amounts (the benchmark is
their running sum along each path), a loss function, one tolerance per
payment date, and a constraint style:

  EU   - unconditional expected loss bound at each date
  TC   - one-step conditional expected loss bound at every node
  LB   - expected path-maximum of per-date excess losses bounded by zero
  CVAR - tail-expectation (CVaR) bound on the positive shortfall per date
"""
from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

from .losses import LossFunction, make_call_loss, make_exponential_loss
from .trees import (
    AdaptedProcess,
    ScenarioTree,
    enumerate_stopping_times,
    is_Q_supermartingale,
)

__all__ = [
    "STYLES",
    "ProblemError",
    "InfeasibleError",
    "UnboundedError",
    "HedgeProblem",
    "SolveResult",
    "loss_from_dict",
    "loss_to_dict",
    "verify_constraints",
    "ConstraintReport",
    "check_american_equivalence",
    "AmericanReport",
]

STYLES = ("EU", "TC", "LB", "CVAR")


class ProblemError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    """The constraint set admits no supermartingale (tolerances too tight)."""


class UnboundedError(RuntimeError):
    """Nothing bounds the initial value from below (tolerances vacuous)."""


def loss_from_dict(d: Mapping) -> LossFunction:
    kind = str(d.get("kind", "")).lower()
    if kind == "call":
        return make_call_loss()
    if kind == "exponential":
        return make_exponential_loss(float(d["p"]))
    raise ProblemError(f"unknown loss kind {kind!r} (expected 'call' or 'exponential')")


def loss_to_dict(loss: LossFunction) -> dict:
    if loss.kind == "call":
        return {"kind": "call"}
    if loss.kind == "exponential":
        return {"kind": "exponential", "p": loss.params[0]}
    raise ProblemError("custom losses have no config representation")


@dataclass(frozen=True)
class HedgeProblem:
    tree: ScenarioTree
    payments: dict[str, float]
    loss: LossFunction
    alphas: tuple[float, ...]
    style: str = "EU"
    cvar_level: float = 0.0
    benchmark: dict[str, float] = field(default=None, compare=False)  # derived

    def __post_init__(self):
        tree = self.tree
        if self.style not in STYLES:
            raise ProblemError(f"style must be one of {STYLES}, got {self.style!r}")
        if len(self.alphas) != tree.n_dates:
            raise ProblemError(
                f"need {tree.n_dates} tolerances, got {len(self.alphas)}"
            )
        if any(math.isnan(a) for a in self.alphas):
            raise ProblemError("tolerances must not be NaN")
        if self.style == "CVAR":
            if not 0.0 <= self.cvar_level < 1.0:
                raise ProblemError(f"cvar level must lie in [0, 1), got {self.cvar_level}")
            if self.loss.kind != "call":
                raise ProblemError("CVAR constraints are defined on the positive shortfall; use the call loss")
        needed = [n for k in range(1, tree.n_dates + 1) for n in tree.date_nodes(k)]
        missing = [n for n in needed if n not in self.payments]
        if missing:
            raise ProblemError(f"payments missing for nodes {missing[:5]}")
        bench = {tree.root: 0.0}
        for k in range(1, tree.n_dates + 1):
            for n in tree.date_nodes(k):
                bench[n] = bench[tree.parent(n)] + float(self.payments[n])
        if self.benchmark is not None:
            for n, v in bench.items():
                if abs(self.benchmark.get(n, v) - v) > 1e-9:
                    raise ProblemError(
                        f"benchmark inconsistent with cumulative payments at node {n!r}"
                    )
        object.__setattr__(self, "benchmark", bench)

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_benchmark(
        cls,
        tree: ScenarioTree,
        benchmark: Mapping[str, float],
        loss: LossFunction,
        alphas,
        style: str = "EU",
        cvar_level: float = 0.0,
    ) -> "HedgeProblem":
        """Build from cumulative benchmark values instead of payments."""
        payments = {}
        for k in range(1, tree.n_dates + 1):
            for n in tree.date_nodes(k):
                prev = 0.0 if k == 1 else float(benchmark[tree.parent(n)])
                payments[n] = float(benchmark[n]) - prev
        return cls(tree, payments, loss, tuple(float(a) for a in alphas), style, cvar_level)

    @classmethod
    def from_dict(cls, d: Mapping) -> "HedgeProblem":
        tree = ScenarioTree.from_dict(d["tree"])
        payments = {str(k): float(v) for k, v in d["payments"].items()}
        loss = loss_from_dict(d["loss"])
        alphas = tuple(float(a) for a in d["alphas"])
        style = str(d.get("style", "EU")).upper()
        cvar_level = float(d.get("cvar_level", 0.0))
        return cls(tree, payments, loss, alphas, style, cvar_level)

    @classmethod
    def from_json(cls, text: str) -> "HedgeProblem":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "tree": self.tree.to_dict(),
            "payments": dict(self.payments),
            "loss": loss_to_dict(self.loss),
            "alphas": list(self.alphas),
            "style": self.style,
            "cvar_level": self.cvar_level,
        }

    # -- views ----------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.tree.n_dates

    def benchmark_slice(self, k: int) -> dict[str, float]:
        return {n: self.benchmark[n] for n in self.tree.date_nodes(k)}

    def alpha(self, k: int) -> float:
        """Tolerance at payment date k (1-based)."""
        return self.alphas[k - 1]

    def risk_neutral(self, tol: float = 1e-9) -> bool:
        return self.tree.measures_equal(tol)


@dataclass
class SolveResult:
    v0: float
    style: str
    solver: str
    M: dict[str, float]
    multipliers: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "v0": self.v0,
            "style": self.style,
            "solver": self.solver,
            "M": dict(self.M),
            "multipliers": {k: dict(v) if isinstance(v, Mapping) else v for k, v in self.multipliers.items()},
            "diagnostics": self.diagnostics,
        }


# -- feasibility ---------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintReport:
    ok: bool
    max_violation: float
    violations: list  # (label, amount)

    def __bool__(self) -> bool:
        return self.ok


def _cvar_discrete(values, probs, level: float) -> float:
    order = sorted(range(len(values)), key=lambda i: values[i])
    acc = 0.0
    z = values[order[-1]]
    for i in order:
        acc += probs[i]
        if acc >= level - 1e-15:
            z = values[i]
            break
    tail = sum(p * max(v - z, 0.0) for v, p in zip(values, probs))
    return z + tail / (1.0 - level)


def verify_constraints(
    problem: HedgeProblem, M: Mapping, tol: float = 1e-8
) -> ConstraintReport:
    """Re-check the style constraints and the Q-supermartingale property."""
    tree, loss = problem.tree, problem.loss
    vals = M.values if isinstance(M, AdaptedProcess) else M
    violations = []

    sm = is_Q_supermartingale(tree, vals, tol=tol)
    for node, ce, lvl in sm.violations:
        violations.append((f"supermartingale@{node}", ce - lvl))

    def excess_loss(node):
        return float(loss(vals[node] - problem.benchmark[node]))

    if problem.style == "EU":
        for k in range(1, problem.n + 1):
            e = sum(tree.prob(nd, "P") * excess_loss(nd) for nd in tree.date_nodes(k))
            if e > problem.alpha(k) + tol:
                violations.append((f"EU@date{k}", e - problem.alpha(k)))
    elif problem.style == "TC":
        for k in range(1, problem.n + 1):
            for u in tree.date_nodes(k - 1):
                e = sum(tree.trans_p(c) * excess_loss(c) for c in tree.children(u))
                if e > problem.alpha(k) + tol:
                    violations.append((f"TC@{u}->date{k}", e - problem.alpha(k)))
    elif problem.style == "LB":
        e = 0.0
        for leaf in tree.leaves:
            path = tree.path(leaf)
            worst = max(
                excess_loss(path[k]) - problem.alpha(k) for k in range(1, problem.n + 1)
            )
            e += tree.prob(leaf, "P") * worst
        if e > tol:
            violations.append(("LB", e))
    elif problem.style == "CVAR":
        for k in range(1, problem.n + 1):
            nodes = tree.date_nodes(k)
            shortfalls = [max(problem.benchmark[nd] - vals[nd], 0.0) for nd in nodes]
            probs = [tree.prob(nd, "P") for nd in nodes]
            c = _cvar_discrete(shortfalls, probs, problem.cvar_level)
            if c > problem.alpha(k) + tol:
                violations.append((f"CVAR@date{k}", c - problem.alpha(k)))

    worst = max((v for _, v in violations), default=0.0)
    return ConstraintReport(not violations, worst, violations)


def verify_tc_pointwise(problem: HedgeProblem, M: Mapping, tol: float = 1e-9) -> bool:
    """Direct node-by-node check of the conditional (TC) constraints."""
    tree, loss = problem.tree, problem.loss
    vals = M.values if isinstance(M, AdaptedProcess) else M
    for k in range(1, problem.n + 1):
        for u in tree.date_nodes(k - 1):
            e = sum(
                tree.trans_p(c) * float(loss(vals[c] - problem.benchmark[c]))
                for c in tree.children(u)
            )
            if e > problem.alpha(k) + tol:
                return False
    return True


@dataclass(frozen=True)
class AmericanReport:
    ok: bool
    witness: tuple | None  # violating (tau, sigma) stop-date maps, if any

    def __bool__(self) -> bool:
        return self.ok


def check_american_equivalence(
    problem: HedgeProblem,
    M: Mapping,
    tol: float = 1e-9,
    max_count: int = 100_000,
) -> AmericanReport:
    """Exhaustive stopping-time-pair form of the conditional constraints.

    For every pair tau <= sigma of stopping times, the expected sum of
    per-date excess losses strictly between tau and sigma must not exceed
    zero.  Agrees with the node-wise conditional check.
    """
    tree, loss = problem.tree, problem.loss
    vals = M.values if isinstance(M, AdaptedProcess) else M
    taus = enumerate_stopping_times(tree, max_count=max_count)

    # cumulative excess along each path: X_k = sum_{i<=k} (l(M_i - S_i) - alpha_i)
    cum: dict[str, list[float]] = {}
    for leaf in tree.leaves:
        path = tree.path(leaf)
        run, acc = [0.0], 0.0
        for k in range(1, problem.n + 1):
            nd = path[k]
            acc += float(loss(vals[nd] - problem.benchmark[nd])) - problem.alpha(k)
            run.append(acc)
        cum[leaf] = run

    pw = {leaf: tree.prob(leaf, "P") for leaf in tree.leaves}
    for t, s in combinations_with_replacement(range(len(taus)), 2):
        for tau, sigma in ((taus[t], taus[s]), (taus[s], taus[t])):
            if not tau <= sigma:
                continue
            e = sum(pw[leaf] * (cum[leaf][sigma[leaf]] - cum[leaf][tau[leaf]]) for leaf in pw)
            if e > tol:
                return AmericanReport(False, (dict(tau.stop_dates), dict(sigma.stop_dates)))
    return AmericanReport(True, None)
