"""Brute-force solvers: one variable per tree node, constraints written
directly from their definitions.  These are the ground truth every
recursion and closed form is tested against.

Call-loss and CVaR problems are linear programs (shortfall epigraphs) and
go through HiGHS.  Exponential-loss problems are exponential-cone programs
and go through Clarabel.  Custom smooth losses fall back to SLSQP.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize

from .problem import (
    HedgeProblem,
    InfeasibleError,
    ProblemError,
    SolveResult,
    UnboundedError,
    verify_constraints,
)

__all__ = [
    "solve_oracle",
    "verify_inclusion_ordering",
    "OrderingViolation",
    "OrderingReport",
    "NODE_CAP",
]

NODE_CAP = 2000
_CLARABEL_OPTS = dict(tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10, max_iter=200)


class OrderingViolation(AssertionError):
    """The three style values came out misordered.

    EU exceeding TC or LB always indicates a solver bug (the EU constraint
    set contains the other two).  TC exceeding LB, however, can be a genuine
    property of the instance: the path-max expectation lets favourable paths
    compensate unfavourable ones, which the almost-sure conditional
    constraints cannot exploit, so neither of TC/LB dominates in general.
    """


def _vacuous(alpha: float) -> bool:
    return math.isinf(alpha) and alpha > 0


def solve_oracle(
    problem: HedgeProblem,
    bounded_box: bool = False,
    node_cap: int = NODE_CAP,
) -> SolveResult:
    """Minimal initial value by direct convex programming.

    With ``bounded_box`` the variables get the floor M >= S - B at every
    node (B spans ten times the tolerance-plus-benchmark range), turning a
    genuinely unbounded instance into a diagnosable one; the box is noted
    in the diagnostics.
    """
    n_nodes = len(problem.tree.node_ids())
    if n_nodes > node_cap:
        raise ProblemError(f"{n_nodes} nodes exceeds oracle cap {node_cap}")
    if problem.loss.kind == "call" or problem.style == "CVAR":
        return _solve_lp(problem, bounded_box)
    if problem.loss.kind == "exponential":
        return _solve_expcone(problem, bounded_box)
    return _solve_slsqp(problem, bounded_box)


def _box_floor(problem: HedgeProblem) -> dict[str, float]:
    s = list(problem.benchmark.values())
    finite = [a for a in problem.alphas if not math.isinf(a)]
    width = 10.0 * ((max(finite) if finite else 1.0) + (max(s) - min(s)) + 1.0)
    return {nd: problem.benchmark[nd] - width for nd in problem.benchmark}


def _supermartingale_rows(tree, idx, n_var):
    rows, rhs, labels = [], [], []
    for k in range(tree.n_dates):
        for u in tree.date_nodes(k):
            row = np.zeros(n_var)
            row[idx[u]] = -1.0
            for c in tree.children(u):
                row[idx[c]] = tree.trans_q(c)
            rows.append(row)
            rhs.append(0.0)
            labels.append(f"smg@{u}")
    return rows, rhs, labels


def _solve_lp(problem: HedgeProblem, bounded_box: bool) -> SolveResult:
    tree = problem.tree
    nodes = tree.node_ids()
    idx = {nd: i for i, nd in enumerate(nodes)}
    n_m = len(nodes)
    dated = [nd for k in range(1, problem.n + 1) for nd in tree.date_nodes(k)]

    cols: list[str] = [f"M:{nd}" for nd in nodes]

    def new_col(name):
        cols.append(name)
        return len(cols) - 1

    s_idx = {}
    if problem.style in ("EU", "TC"):
        s_idx = {nd: new_col(f"s:{nd}") for nd in dated}
    w_idx, z_idx, u_idx = {}, {}, {}
    if problem.style == "LB":
        w_idx = {leaf: new_col(f"w:{leaf}") for leaf in tree.leaves}
    if problem.style == "CVAR":
        z_idx = {k: new_col(f"z:{k}") for k in range(1, problem.n + 1)}
        u_idx = {nd: new_col(f"u:{nd}") for nd in dated}

    n_var = len(cols)
    rows, rhs, labels = _supermartingale_rows(tree, idx, n_var)

    def add(row, b, label):
        rows.append(row)
        rhs.append(b)
        labels.append(label)

    S = problem.benchmark
    if problem.style in ("EU", "TC"):
        for nd in dated:  # s_nd >= S_nd - M_nd  (s >= 0 via bounds)
            row = np.zeros(n_var)
            row[idx[nd]] = -1.0
            row[s_idx[nd]] = -1.0
            add(row, -S[nd], f"shortfall@{nd}")
    if problem.style == "EU":
        for k in range(1, problem.n + 1):
            if _vacuous(problem.alpha(k)):
                continue
            row = np.zeros(n_var)
            for nd in tree.date_nodes(k):
                row[s_idx[nd]] = tree.prob(nd, "P")
            add(row, problem.alpha(k), f"EU@date{k}")
    elif problem.style == "TC":
        for k in range(1, problem.n + 1):
            if _vacuous(problem.alpha(k)):
                continue
            for u in tree.date_nodes(k - 1):
                row = np.zeros(n_var)
                for c in tree.children(u):
                    row[s_idx[c]] = tree.trans_p(c)
                add(row, problem.alpha(k), f"TC@{u}")
    elif problem.style == "LB":
        for leaf in tree.leaves:
            path = tree.path(leaf)
            for k in range(1, problem.n + 1):
                if _vacuous(problem.alpha(k)):
                    continue
                nd = path[k]
                row = np.zeros(n_var)  # S_nd - M_nd - alpha_k <= w_leaf
                row[idx[nd]] = -1.0
                row[w_idx[leaf]] = -1.0
                add(row, problem.alpha(k) - S[nd], f"lb-excess@{leaf}:{k}")
                row = np.zeros(n_var)  # -alpha_k <= w_leaf
                row[w_idx[leaf]] = -1.0
                add(row, problem.alpha(k), f"lb-floor@{leaf}:{k}")
        row = np.zeros(n_var)
        for leaf in tree.leaves:
            row[w_idx[leaf]] = tree.prob(leaf, "P")
        add(row, 0.0, "lb-mean")
    elif problem.style == "CVAR":
        lam = problem.cvar_level
        for k in range(1, problem.n + 1):
            if _vacuous(problem.alpha(k)):
                continue
            for nd in tree.date_nodes(k):  # S - M - z_k <= u_nd
                row = np.zeros(n_var)
                row[idx[nd]] = -1.0
                row[z_idx[k]] = -1.0
                row[u_idx[nd]] = -1.0
                add(row, -S[nd], f"cvar-excess@{nd}")
            row = np.zeros(n_var)  # E[u]/(1-lam) + z_k <= alpha_k
            for nd in tree.date_nodes(k):
                row[u_idx[nd]] = tree.prob(nd, "P") / (1.0 - lam)
            row[z_idx[k]] = 1.0
            add(row, problem.alpha(k), f"CVAR@date{k}")

    bounds: list[tuple] = [(None, None)] * n_m
    box = _box_floor(problem) if bounded_box else None
    if box is not None:
        bounds = [(box[nd], None) for nd in nodes]
    bounds += [(0.0, None)] * len(s_idx)
    bounds += [(None, None)] * len(w_idx)
    if problem.style == "CVAR":
        bounds += [(0.0, None)] * len(z_idx)
        bounds += [(0.0, None)] * len(u_idx)

    c = np.zeros(n_var)
    c[idx[tree.root]] = 1.0
    A = np.vstack(rows) if rows else np.zeros((0, n_var))
    res = linprog(c, A_ub=A, b_ub=np.array(rhs), bounds=bounds, method="highs")

    if res.status == 2:
        raise InfeasibleError(
            f"no feasible supermartingale: tolerances {problem.alphas} too tight "
            f"for style {problem.style}"
        )
    if res.status == 3:
        raise UnboundedError(
            "initial value unbounded below (vacuous tolerances); "
            "re-run with bounded_box=True to diagnose"
        )
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")

    x = res.x
    M = {nd: float(x[idx[nd]]) for nd in nodes}
    gap = _lp_duality_gap(res, c, np.array(rhs), bounds)
    diag = {
        "status": "optimal",
        "method": "highs-lp",
        "duality_gap": gap,
        "iterations": int(getattr(res, "nit", -1)),
    }
    if box is not None:
        diag["lower_box"] = "M >= S - B at every node"
    multipliers = {}
    if problem.style == "CVAR":
        multipliers["z"] = {k: float(x[z_idx[k]]) for k in z_idx}
    rep = verify_constraints(problem, M, tol=1e-8)
    diag["feasible"] = bool(rep)
    diag["max_violation"] = rep.max_violation
    return SolveResult(float(res.fun), problem.style, "oracle-lp", M, multipliers, diag)


def _lp_duality_gap(res, c, b_ub, bounds) -> float:
    """|primal - dual| from the HiGHS marginals; NaN when unavailable."""
    try:
        y = res.ineqlin.marginals  # <= 0 for A x <= b
        dual = float(b_ub @ y)
        for (lo, hi), ml, mu in zip(bounds, res.lower.marginals, res.upper.marginals):
            if lo is not None and lo != -np.inf:
                dual += lo * float(ml)
            if hi is not None and hi != np.inf:
                dual += hi * float(mu)
        return abs(float(res.fun) - dual)
    except (AttributeError, TypeError):
        return float("nan")


def _solve_expcone(problem: HedgeProblem, bounded_box: bool) -> SolveResult:
    import cvxpy as cp

    tree = problem.tree
    p = problem.loss.params[0]
    nodes = tree.node_ids()
    idx = {nd: i for i, nd in enumerate(nodes)}
    M = cp.Variable(len(nodes))
    S = problem.benchmark
    cons = []
    for k in range(tree.n_dates):
        for u in tree.date_nodes(k):
            cons.append(
                cp.sum(cp.hstack([tree.trans_q(c) * M[idx[c]] for c in tree.children(u)]))
                <= M[idx[u]]
            )

    def exp_term(nd):
        return cp.exp(-p * (M[idx[nd]] - S[nd]))

    if problem.style == "EU":
        for k in range(1, problem.n + 1):
            if _vacuous(problem.alpha(k)):
                continue
            cons.append(
                cp.sum(cp.hstack([tree.prob(nd, "P") * exp_term(nd) for nd in tree.date_nodes(k)]))
                <= 1.0 + problem.alpha(k)
            )
    elif problem.style == "TC":
        for k in range(1, problem.n + 1):
            if _vacuous(problem.alpha(k)):
                continue
            for u in tree.date_nodes(k - 1):
                cons.append(
                    cp.sum(cp.hstack([tree.trans_p(c) * exp_term(c) for c in tree.children(u)]))
                    <= 1.0 + problem.alpha(k)
                )
    elif problem.style == "LB":
        w = cp.Variable(len(tree.leaves))
        for i, leaf in enumerate(tree.leaves):
            path = tree.path(leaf)
            for k in range(1, problem.n + 1):
                if _vacuous(problem.alpha(k)):
                    continue
                cons.append(exp_term(path[k]) - 1.0 - problem.alpha(k) <= w[i])
        pw = np.array([tree.prob(leaf, "P") for leaf in tree.leaves])
        cons.append(pw @ w <= 0.0)
    else:
        raise ProblemError(f"exponential-cone oracle does not handle style {problem.style}")

    if bounded_box:
        box = _box_floor(problem)
        cons += [M[idx[nd]] >= box[nd] for nd in nodes]

    prob = cp.Problem(cp.Minimize(M[idx[tree.root]]), cons)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob.solve(solver=cp.CLARABEL, **_CLARABEL_OPTS)
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        raise InfeasibleError(f"no feasible supermartingale for style {problem.style}")
    if prob.status in ("unbounded", "unbounded_inaccurate"):
        raise UnboundedError("initial value unbounded below (vacuous tolerances)")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"cone solver failed: {prob.status}")

    Mval = {nd: float(M.value[idx[nd]]) for nd in nodes}
    rep = verify_constraints(problem, Mval, tol=1e-6)
    diag = {
        "status": prob.status,
        "method": "clarabel-expcone",
        "feasible": bool(rep),
        "max_violation": rep.max_violation,
    }
    if bounded_box:
        diag["lower_box"] = "M >= S - B at every node"
    return SolveResult(float(prob.value), problem.style, "oracle-cone", Mval, {}, diag)


def _slsqp_objective_constraints(problem: HedgeProblem):
    tree, loss = problem.tree, problem.loss
    nodes = tree.node_ids()
    idx = {nd: i for i, nd in enumerate(nodes)}
    S = np.array([problem.benchmark[nd] for nd in nodes])

    cons = []
    for k in range(tree.n_dates):
        for u in tree.date_nodes(k):
            kid_ix = [idx[c] for c in tree.children(u)]
            qs = np.array([tree.trans_q(c) for c in tree.children(u)])
            cons.append(
                {"type": "ineq", "fun": (lambda x, i=idx[u], j=kid_ix, q=qs: x[i] - q @ x[j])}
            )

    def date_loss(x, k):
        nds = tree.date_nodes(k)
        jj = [idx[nd] for nd in nds]
        pr = np.array([tree.prob(nd, "P") for nd in nds])
        return pr @ np.asarray(loss(x[jj] - S[jj]), dtype=float)

    if problem.style == "EU":
        for k in range(1, problem.n + 1):
            if not _vacuous(problem.alpha(k)):
                cons.append(
                    {"type": "ineq", "fun": (lambda x, k=k: problem.alpha(k) - date_loss(x, k))}
                )
    elif problem.style == "TC":
        for k in range(1, problem.n + 1):
            if _vacuous(problem.alpha(k)):
                continue
            for u in tree.date_nodes(k - 1):
                kid = tree.children(u)
                jj = [idx[c] for c in kid]
                pr = np.array([tree.trans_p(c) for c in kid])
                sv = np.array([problem.benchmark[c] for c in kid])
                cons.append(
                    {
                        "type": "ineq",
                        "fun": (
                            lambda x, jj=jj, pr=pr, sv=sv, a=problem.alpha(k): a
                            - pr @ np.asarray(loss(x[jj] - sv), dtype=float)
                        ),
                    }
                )
    elif problem.style == "LB":
        # one smooth-ish epigraph per leaf via soft handling: use exact max
        pw = np.array([tree.prob(leaf, "P") for leaf in tree.leaves])
        paths = [tree.path(leaf) for leaf in tree.leaves]

        def lb_fun(x):
            tot = 0.0
            for w, path in zip(pw, paths):
                worst = max(
                    float(loss(x[idx[path[k]]] - problem.benchmark[path[k]]))
                    - problem.alpha(k)
                    for k in range(1, problem.n + 1)
                    if not _vacuous(problem.alpha(k))
                )
                tot += w * worst
            return -tot

        cons.append({"type": "ineq", "fun": lb_fun})
    else:
        raise ProblemError(f"SLSQP fallback does not handle style {problem.style}")

    c = np.zeros(len(nodes))
    c[idx[tree.root]] = 1.0
    return nodes, idx, c, cons, S


def _slsqp_start(problem: HedgeProblem, nodes, idx, S):
    """A comfortably feasible start: hedge to the tightest tolerance."""
    finite = [a for a in problem.alphas if not math.isinf(a)]
    cushion = 1.0
    if finite and problem.loss.generalized_inverse_fn is not None:
        g = float(problem.loss.generalized_inverse(min(finite)))
        if math.isfinite(g):
            cushion = abs(g) + 1.0
    x0 = np.empty(len(nodes))
    tree = problem.tree
    level = {nd: S[idx[nd]] + cushion for nd in nodes}
    for k in range(tree.n_dates - 1, -1, -1):
        for u in tree.date_nodes(k):
            ce = sum(tree.trans_q(c) * level[c] for c in tree.children(u))
            level[u] = max(level[u], ce)
    for nd in nodes:
        x0[idx[nd]] = level[nd]
    return x0


def _solve_slsqp(problem: HedgeProblem, bounded_box: bool, restarts: int = 3) -> SolveResult:
    nodes, idx, c, cons, S = _slsqp_objective_constraints(problem)
    x0 = _slsqp_start(problem, nodes, idx, S)
    rng = np.random.default_rng(0)
    best = None
    for trial in range(restarts):
        start = x0 if trial == 0 else x0 + rng.normal(scale=0.1, size=x0.size)
        res = minimize(
            lambda x: c @ x,
            start,
            jac=lambda x: c,
            constraints=cons,
            method="SLSQP",
            options={"maxiter": 400, "ftol": 1e-12},
        )
        if res.success and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise RuntimeError("SLSQP oracle failed to converge from all starts")
    M = {nd: float(best.x[idx[nd]]) for nd in nodes}
    rep = verify_constraints(problem, M, tol=1e-6)
    diag = {
        "status": "optimal",
        "method": "slsqp",
        "feasible": bool(rep),
        "max_violation": rep.max_violation,
    }
    return SolveResult(float(best.fun), problem.style, "oracle-slsqp", M, {}, diag)


@dataclass(frozen=True)
class OrderingReport:
    v_eu: float
    v_tc: float
    v_lb: float

    def as_tuple(self) -> tuple:
        return (self.v_eu, self.v_tc, self.v_lb)


def verify_inclusion_ordering(problem: HedgeProblem, tol: float = 1e-7) -> OrderingReport:
    """Solve one instance under all three styles and assert EU <= TC <= LB."""
    vals = {}
    for style in ("EU", "TC", "LB"):
        q = HedgeProblem(
            problem.tree, problem.payments, problem.loss, problem.alphas, style, problem.cvar_level
        )
        vals[style] = solve_oracle(q).v0
    if not (vals["EU"] <= vals["TC"] + tol and vals["TC"] <= vals["LB"] + tol):
        raise OrderingViolation(
            f"style ordering violated: EU={vals['EU']}, TC={vals['TC']}, LB={vals['LB']}"
        )
    return OrderingReport(vals["EU"], vals["TC"], vals["LB"])
