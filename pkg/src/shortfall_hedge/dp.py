"""Backward recursions for the minimal hedging value.

The time-consistent value admits a one-step recursion: at each node either
the next-date tolerance already holds at the continuation value, or a
negative multiplier re-prices the binding constraint through the inverse
marginal loss.  The two-date European and lookback problems reduce to
small convex programs over date-1 variables; the exponential European case
has a Lagrange system solved by one scalar root-find.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq, linprog, minimize

from .losses import LossFunction, NotSmoothLossError, RootBracketError, solve_lambda
from .problem import (
    HedgeProblem,
    InfeasibleError,
    ProblemError,
    SolveResult,
)

__all__ = [
    "tc_solve",
    "tc_solve_general",
    "tc_solve_riskneutral",
    "eu_solve_n2",
    "eu_exponential_n2",
    "lb_value_n2",
]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ProblemError(msg)


def _check_tolerances(problem: HedgeProblem) -> None:
    bad = [a for a in problem.alphas if not a > problem.loss.inf_limit]
    if bad:
        raise InfeasibleError(
            f"tolerances {bad} do not exceed the loss limit {problem.loss.inf_limit}"
        )


# ---------------------------------------------------------------------------
# time-consistent recursion, general two-measure form
# ---------------------------------------------------------------------------


def tc_solve_general(problem: HedgeProblem) -> SolveResult:
    """Time-consistent value by backward induction with per-node multipliers.

    Terminal step: V_{n-1} = E_Q[S_n + I(lambda Z_n/Z_{n-1}) | node], with
    lambda solving the terminal tolerance equation.  Earlier steps add the
    positive part of the re-priced shortfall only where the constraint
    binds at the continuation value.
    """
    _require(problem.style == "TC", f"tc_solve_general got style {problem.style}")
    _require(problem.loss.smooth, "general recursion needs a strictly convex smooth loss")
    _check_tolerances(problem)
    tree, loss, S = problem.tree, problem.loss, problem.benchmark
    n = problem.n

    M_out: dict[str, float] = {}
    lambdas: dict[str, float] = {}
    binding: dict[str, bool] = {}

    lam_term = solve_lambda(tree, loss, n, problem.alpha(n), floor=None)
    vhat: dict[str, float] = {}
    for u in tree.date_nodes(n - 1):
        lam = lam_term[u]
        lambdas[u] = lam
        binding[u] = True  # the terminal constraint always prices
        for c in tree.children(u):
            ratio = tree.trans_q(c) / tree.trans_p(c)
            M_out[c] = S[c] + float(loss.inverse_derivative(lam * ratio))
        vhat[u] = math.fsum(tree.trans_q(c) * M_out[c] for c in tree.children(u))

    for k in range(n - 1, 0, -1):
        vnext = vhat
        alpha_k = problem.alpha(k)
        floor = {c: vnext[c] - S[c] for c in tree.date_nodes(k)}
        bind_nodes = []
        for u in tree.date_nodes(k - 1):
            cond = math.fsum(
                tree.trans_p(c) * float(loss(floor[c])) for c in tree.children(u)
            )
            binding[u] = cond > alpha_k
            if binding[u]:
                bind_nodes.append(u)
        lam_k = solve_lambda(tree, loss, k, alpha_k, floor=floor, nodes=bind_nodes)
        vhat = {}
        for u in tree.date_nodes(k - 1):
            ce = math.fsum(tree.trans_q(c) * vnext[c] for c in tree.children(u))
            if binding[u]:
                lam = lam_k[u]
                lambdas[u] = lam
                bump = 0.0
                for c in tree.children(u):
                    ratio = tree.trans_q(c) / tree.trans_p(c)
                    lift = max(
                        S[c] - vnext[c] + float(loss.inverse_derivative(lam * ratio)), 0.0
                    )
                    M_out[c] = vnext[c] + lift
                    bump += tree.trans_q(c) * lift
                vhat[u] = ce + bump
            else:
                for c in tree.children(u):
                    M_out[c] = vnext[c]
                vhat[u] = ce

    v0 = vhat[tree.root]
    M_out[tree.root] = v0
    return SolveResult(
        v0,
        "TC",
        "dp-tc-general",
        M_out,
        {"lambda": lambdas, "binding": binding},
        {"status": "optimal"},
    )


# ---------------------------------------------------------------------------
# time-consistent recursion, single-measure form
# ---------------------------------------------------------------------------


def _threshold_root(loss, p_vec, floors, alpha, cond) -> float:
    """Solve E[l(t v floors)] = alpha for the scalar threshold t < 0."""

    def g(t):
        return float(np.dot(p_vec, loss(np.maximum(t, floors)))) - alpha

    lo = min(float(np.min(floors)), 0.0) - 1.0
    # below every floor the equation is flat at cond - alpha > 0
    while g(lo) <= 0.0:
        lo -= 1.0
        if lo < float(np.min(floors)) - 2.0:
            raise RootBracketError("threshold equation lost its sign change")
    return brentq(g, lo, 0.0, xtol=1e-15, rtol=8.9e-16, maxiter=200)


def tc_solve_riskneutral(problem: HedgeProblem) -> SolveResult:
    """Single-measure specialization: cushions come from the generalized
    inverse of the loss, and binding nodes re-price through a scalar
    threshold instead of a multiplied density ratio."""
    _require(problem.style == "TC", f"tc_solve_riskneutral got style {problem.style}")
    _require(
        problem.risk_neutral(),
        "risk-neutral recursion needs identical P and Q transition probabilities",
    )
    _check_tolerances(problem)
    tree, loss, S = problem.tree, problem.loss, problem.benchmark
    n = problem.n

    cushion = float(loss.generalized_inverse(problem.alpha(n)))
    M_out: dict[str, float] = {}
    thresholds: dict[str, float] = {}
    binding: dict[str, bool] = {}
    vhat: dict[str, float] = {}
    for u in tree.date_nodes(n - 1):
        for c in tree.children(u):
            M_out[c] = S[c] + cushion
        vhat[u] = math.fsum(tree.trans_p(c) * M_out[c] for c in tree.children(u))
        binding[u] = True

    for k in range(n - 1, 0, -1):
        vnext = vhat
        alpha_k = problem.alpha(k)
        vhat = {}
        for u in tree.date_nodes(k - 1):
            kids = tree.children(u)
            p_vec = np.array([tree.trans_p(c) for c in kids])
            floors = np.array([vnext[c] - S[c] for c in kids])
            cond = float(p_vec @ np.asarray(loss(floors), dtype=float))
            ce = float(p_vec @ np.array([vnext[c] for c in kids]))
            binding[u] = cond > alpha_k
            if binding[u]:
                t = _threshold_root(loss, p_vec, floors, alpha_k, cond)
                thresholds[u] = t
                bump = 0.0
                for c in kids:
                    lift = max(S[c] - vnext[c] + t, 0.0)
                    M_out[c] = vnext[c] + lift
                    bump += tree.trans_p(c) * lift
                vhat[u] = ce + bump
            else:
                for c in kids:
                    M_out[c] = vnext[c]
                vhat[u] = ce

    v0 = vhat[tree.root]
    M_out[tree.root] = v0
    return SolveResult(
        v0,
        "TC",
        "dp-tc-riskneutral",
        M_out,
        {"lambda": thresholds, "binding": binding},
        {"status": "optimal"},
    )


def riskneutral_call_values(problem: HedgeProblem) -> dict[str, float]:
    """Value process from the max-form recursion for the call loss:
    V_{k-1} = max(E[V_k], E[V_k v S_k] - alpha_k) node-wise.  Used as an
    independent route to the same numbers as the threshold recursion."""
    _require(problem.loss.kind == "call", "max-form recursion is call-loss only")
    _require(problem.risk_neutral(), "max-form recursion needs P = Q")
    tree, S = problem.tree, problem.benchmark
    n = problem.n
    vhat = {}
    for u in tree.date_nodes(n - 1):
        vhat[u] = (
            math.fsum(tree.trans_p(c) * S[c] for c in tree.children(u)) - problem.alpha(n)
        )
    out = dict(vhat)
    for k in range(n - 1, 0, -1):
        vnext, vhat = vhat, {}
        for u in tree.date_nodes(k - 1):
            kids = tree.children(u)
            plain = math.fsum(tree.trans_p(c) * vnext[c] for c in kids)
            lifted = (
                math.fsum(tree.trans_p(c) * max(vnext[c], S[c]) for c in kids)
                - problem.alpha(k)
            )
            vhat[u] = max(plain, lifted)
        out.update(vhat)
    return out


def tc_solve(problem: HedgeProblem) -> SolveResult:
    """Route to the single-measure or two-measure recursion as appropriate."""
    if problem.risk_neutral():
        return tc_solve_riskneutral(problem)
    return tc_solve_general(problem)


# ---------------------------------------------------------------------------
# two-date European problem
# ---------------------------------------------------------------------------


def _date1_arrays(problem: HedgeProblem):
    tree, S = problem.tree, problem.benchmark
    d1 = tree.date_nodes(1)
    q1 = np.array([tree.prob(u, "Q") for u in d1])
    p1 = np.array([tree.prob(u, "P") for u in d1])
    s1 = np.array([S[u] for u in d1])
    ce_s2 = np.array(
        [math.fsum(tree.trans_q(c) * S[c] for c in tree.children(u)) for u in d1]
    )
    return d1, q1, p1, s1, ce_s2


def eu_exponential_n2(problem: HedgeProblem) -> SolveResult:
    """Two-date European exponential case via its Lagrange system.

    The two expectation constraints collapse to one scalar equation in the
    multiplier ratio t; the regime split compares the tolerance ratio with
    the two Jensen bounds of the composite factor X, and in the one-sided
    regimes a single constraint prices the whole problem.
    """
    _require(problem.n == 2, "this routine is specific to two payment dates")
    _require(problem.loss.kind == "exponential", "needs the exponential loss")
    _require(problem.style == "EU", f"eu_exponential_n2 got style {problem.style}")
    _check_tolerances(problem)
    p = problem.loss.params[0]
    tree, S = problem.tree, problem.benchmark
    d1, q1, p1, s1, ce_s2 = _date1_arrays(problem)
    z1 = q1 / p1
    a1, a2 = problem.alphas

    d1_kids = [tree.children(u) for u in d1]
    ratios = [np.array([tree.trans_q(c) / tree.trans_p(c) for c in kids]) for kids in d1_kids]
    pks = [np.array([tree.trans_p(c) for c in kids]) for kids in d1_kids]
    disp = np.array([-(pk @ (r * np.log(r))) / p for pk, r in zip(pks, ratios)])  # D_1
    X = np.exp(p * (ce_s2 - s1 + disp))

    ratio_tol = (1.0 + a1) / (1.0 + a2)
    upper = float(q1 @ (1.0 / X))  # limit of the ratio map at t -> 0
    lower = 1.0 / float(q1 @ X)  # limit at t -> +inf

    diag: dict = {"X_bounds": (lower, upper)}
    if ratio_tol <= lower:
        regime = "first-only"
        m1 = s1 - np.log((1.0 + a1) * z1) / p
        lam_mu = ((1.0 / (p * (1.0 + a1))), 0.0)
    elif ratio_tol >= upper:
        regime = "second-only"
        m1 = ce_s2 + disp - np.log((1.0 + a2) * z1) / p
        lam_mu = (0.0, 1.0 / (p * (1.0 + a2)))
    else:
        regime = "interior"

        def phi(s):
            t = math.exp(s)
            f = float(q1 @ (1.0 / (t + X)))
            return f / (1.0 - t * f) - ratio_tol

        s_lo, s_hi = math.log(1e-10), math.log(1e10)
        while phi(s_lo) < 0.0 and s_lo > -80:
            s_lo -= math.log(10.0)
        while phi(s_hi) > 0.0 and s_hi < 80:
            s_hi += math.log(10.0)
        t_star = math.exp(brentq(phi, s_lo, s_hi, xtol=1e-14, rtol=8.9e-16, maxiter=300))
        mu = 1.0 / (p * (t_star * (1.0 + a1) + (1.0 + a2)))
        lam = t_star * mu
        lam_mu = (lam, mu)
        m1 = np.log((p * lam * np.exp(p * s1) + p * mu * np.exp(p * (ce_s2 + disp))) / z1) / p
        diag["t"] = t_star
        r1 = float(q1 @ (1.0 / (lam + mu * X))) - p * (1.0 + a1)
        r2 = float(q1 @ (X / (lam + mu * X))) - p * (1.0 + a2)
        diag["stationarity_residual"] = (r1, r2)

    v0 = float(q1 @ m1)
    diag["regime"] = regime
    diag["status"] = "optimal"

    # date-2 continuation: per-node threshold from the date-1 value map
    M = {tree.root: v0}
    for i, u in enumerate(d1):
        M[u] = float(m1[i])
        n_u = math.exp(-p * (m1[i] - ce_s2[i] - disp[i])) - 1.0
        for c, r in zip(d1_kids[i], ratios[i]):
            M[c] = S[c] - math.log((1.0 + n_u) * r) / p
    return SolveResult(
        v0,
        "EU",
        "dp-eu-exponential",
        M,
        {"lambda": lam_mu[0], "mu": lam_mu[1]},
        diag,
    )


def _eu_n2_lp_call(problem: HedgeProblem) -> SolveResult:
    """Single-measure two-date European call problem over date-1 variables."""
    tree, S = problem.tree, problem.benchmark
    d1, q1, p1, s1, ce_s2 = _date1_arrays(problem)
    a1, a2 = problem.alphas
    m = len(d1)
    # variables: M (m), shortfall vs s1 (m), shortfall vs ce_s2 (m)
    c = np.concatenate([q1, np.zeros(2 * m)])
    rows, rhs = [], []
    for i in range(m):
        r = np.zeros(3 * m)
        r[i] = -1.0
        r[m + i] = -1.0
        rows.append(r)
        rhs.append(-s1[i])
        r = np.zeros(3 * m)
        r[i] = -1.0
        r[2 * m + i] = -1.0
        rows.append(r)
        rhs.append(-ce_s2[i])
    r = np.zeros(3 * m)
    r[m : 2 * m] = p1
    rows.append(r)
    rhs.append(a1)
    r = np.zeros(3 * m)
    r[2 * m :] = p1
    rows.append(r)
    rhs.append(a2)
    bounds = [(None, None)] * m + [(0.0, None)] * (2 * m)
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleError("two-date European constraints infeasible")
    if res.status != 0:
        raise RuntimeError(f"date-1 LP failed: {res.message}")
    m1 = res.x[:m]
    M = {tree.root: float(res.fun)}
    for i, u in enumerate(d1):
        M[u] = float(m1[i])
        for ch in tree.children(u):
            M[ch] = float(m1[i] + S[ch] - ce_s2[i])  # martingale continuation
    return SolveResult(float(res.fun), "EU", "dp-eu-call-lp", M, {}, {"status": "optimal"})


def _date1_value_inverse(problem, u, kids, m_target, alpha_hint):
    """Invert the date-1 value map in its tolerance argument by bisection."""
    tree, loss, S = problem.tree, problem.loss, problem.benchmark

    def v1(alpha):
        lam = solve_lambda(tree, loss, 2, alpha, floor=None, nodes=[u])[u]
        return math.fsum(
            tree.trans_q(c)
            * (S[c] + float(loss.inverse_derivative(lam * tree.trans_q(c) / tree.trans_p(c))))
            for c in kids
        )

    lo_lim = problem.loss.inf_limit

    def g(s):
        return v1(lo_lim + math.exp(s)) - m_target

    s_lo = math.log(max(alpha_hint - lo_lim, 1e-8)) - 20.0
    s_hi = math.log(max(alpha_hint - lo_lim, 1e-8)) + 20.0
    while g(s_lo) < 0.0 and s_lo > -60:
        s_lo -= 5.0
    while g(s_hi) > 0.0 and s_hi < 60:
        s_hi += 5.0
    s = brentq(g, s_lo, s_hi, xtol=1e-13, rtol=8.9e-16, maxiter=300)
    return lo_lim + math.exp(s)


def eu_solve_n2(problem: HedgeProblem) -> SolveResult:
    """Two-date European value as a convex program over date-1 variables.

    Exponential losses go through the Lagrange routine; the single-measure
    call case is a small LP; other smooth losses run a nested scheme where
    the second constraint is the expectation of the inverted date-1 value
    map, solved with SLSQP.
    """
    _require(problem.n == 2, "this routine is specific to two payment dates")
    _require(problem.style == "EU", f"eu_solve_n2 got style {problem.style}")
    _check_tolerances(problem)
    if problem.loss.kind == "exponential":
        return eu_exponential_n2(problem)
    if problem.risk_neutral():
        if problem.loss.kind == "call":
            return _eu_n2_lp_call(problem)
        return _eu_n2_riskneutral_smooth(problem)
    if not problem.loss.smooth:
        raise NotSmoothLossError(
            "two-measure two-date European recursion needs a smooth loss "
            "(use the oracle for the call loss off the risk-neutral case)"
        )
    return _eu_n2_nested(problem)


def _eu_n2_riskneutral_smooth(problem: HedgeProblem) -> SolveResult:
    loss = problem.loss
    d1, q1, p1, s1, ce_s2 = _date1_arrays(problem)
    a1, a2 = problem.alphas
    cons = [
        {"type": "ineq", "fun": lambda x: a1 - float(p1 @ np.asarray(loss(x - s1), dtype=float))},
        {"type": "ineq", "fun": lambda x: a2 - float(p1 @ np.asarray(loss(x - ce_s2), dtype=float))},
    ]
    gi = loss.generalized_inverse
    x0 = np.maximum(s1 + float(gi(a1)), ce_s2 + float(gi(a2))) + 0.5
    res = minimize(
        lambda x: float(q1 @ x),
        x0,
        jac=lambda x: q1,
        constraints=cons,
        method="SLSQP",
        options={"maxiter": 500, "ftol": 1e-12},
    )
    if not res.success:
        raise RuntimeError(f"date-1 program failed: {res.message}")
    tree = problem.tree
    M = {tree.root: float(res.fun)}
    for i, u in enumerate(d1):
        M[u] = float(res.x[i])
        for ch in tree.children(u):
            M[ch] = float(res.x[i] + problem.benchmark[ch] - ce_s2[i])
    return SolveResult(float(res.fun), "EU", "dp-eu-slsqp", M, {}, {"status": "optimal"})


def _eu_n2_nested(problem: HedgeProblem) -> SolveResult:
    tree, loss, S = problem.tree, problem.loss, problem.benchmark
    d1, q1, p1, s1, ce_s2 = _date1_arrays(problem)
    a1, a2 = problem.alphas
    kids = {u: tree.children(u) for u in d1}

    def second_constraint(x):
        tot = 0.0
        for i, u in enumerate(d1):
            tot += p1[i] * _date1_value_inverse(problem, u, kids[u], float(x[i]), a2)
        return a2 - tot

    cons = [
        {"type": "ineq", "fun": lambda x: a1 - float(p1 @ np.asarray(loss(x - s1), dtype=float))},
        {"type": "ineq", "fun": second_constraint},
    ]
    # start at the per-node value of the date-2-only problem, padded to cover date 1
    start = np.empty(len(d1))
    for i, u in enumerate(d1):
        lam = solve_lambda(tree, loss, 2, a2, floor=None, nodes=[u])[u]
        start[i] = math.fsum(
            tree.trans_q(c)
            * (S[c] + float(loss.inverse_derivative(lam * tree.trans_q(c) / tree.trans_p(c))))
            for c in kids[u]
        )
    gi1 = float(loss.generalized_inverse(a1))
    x0 = np.maximum(start, s1 + gi1) + 0.25
    res = minimize(
        lambda x: float(q1 @ x),
        x0,
        jac=lambda x: q1,
        constraints=cons,
        method="SLSQP",
        options={"maxiter": 300, "ftol": 1e-11},
    )
    if not res.success:
        raise RuntimeError(f"nested date-1 program failed: {res.message}")
    m1 = res.x
    M = {tree.root: float(res.fun)}
    for i, u in enumerate(d1):
        M[u] = float(m1[i])
        n_u = _date1_value_inverse(problem, u, kids[u], float(m1[i]), a2)
        lam_u = solve_lambda(tree, loss, 2, n_u, floor=None, nodes=[u])[u]
        for c in kids[u]:
            r = tree.trans_q(c) / tree.trans_p(c)
            M[c] = S[c] + float(loss.inverse_derivative(lam_u * r))
    return SolveResult(float(res.fun), "EU", "dp-eu-nested", M, {}, {"status": "optimal"})


# ---------------------------------------------------------------------------
# two-date lookback problem
# ---------------------------------------------------------------------------


def lb_value_n2(problem: HedgeProblem) -> SolveResult:
    """Two-date lookback value via date-1 variables plus a zero-mean
    threshold process: the date-1 state is (threshold budget, running
    excess), and the terminal convention collapses the inner value to a
    per-node constraint on the children."""
    _require(problem.n == 2, "this routine is specific to two payment dates")
    _require(problem.style == "LB", f"lb_value_n2 got style {problem.style}")
    _check_tolerances(problem)
    if problem.loss.kind == "call":
        return _lb_n2_lp(problem)
    if problem.loss.kind == "exponential":
        return _lb_n2_expcone(problem)
    raise ProblemError("two-date lookback recursion covers call and exponential losses")


def _lb_n2_lp(problem: HedgeProblem) -> SolveResult:
    tree, S = problem.tree, problem.benchmark
    d1 = tree.date_nodes(1)
    d2 = [c for u in d1 for c in tree.children(u)]
    a1, a2 = problem.alphas
    im = {u: i for i, u in enumerate(d1)}
    n1, n2 = len(d1), len(d2)
    ic = {c: n1 + i for i, c in enumerate(d2)}
    iN = {u: n1 + n2 + im[u] for u in d1}
    iv = {c: n1 + n2 + n1 + i for i, c in enumerate(d2)}
    n_var = 2 * n1 + 2 * n2

    rows, rhs = [], []

    def add(entries, b):
        r = np.zeros(n_var)
        for j, val in entries:
            r[j] = val
        rows.append(r)
        rhs.append(b)

    for u in d1:
        add([(ic[c], tree.trans_q(c)) for c in tree.children(u)] + [(im[u], -1.0)], 0.0)
        for c in tree.children(u):
            add([(im[u], -1.0), (iv[c], -1.0)], a1 - S[u])  # S1 - m_u - a1 <= v_c
            add([(iv[c], -1.0)], a1)
            add([(ic[c], -1.0), (iv[c], -1.0)], a2 - S[c])  # S2 - m_c - a2 <= v_c
            add([(iv[c], -1.0)], a2)
        add(
            [(iv[c], tree.trans_p(c)) for c in tree.children(u)] + [(iN[u], -1.0)],
            0.0,
        )
    add([(iN[u], tree.prob(u, "P")) for u in d1], 0.0)

    c_vec = np.zeros(n_var)
    for u in d1:
        c_vec[im[u]] = tree.prob(u, "Q")
    res = linprog(
        c_vec, A_ub=np.array(rows), b_ub=np.array(rhs),
        bounds=[(None, None)] * n_var, method="highs",
    )
    if res.status == 2:
        raise InfeasibleError("two-date lookback constraints infeasible")
    if res.status != 0:
        raise RuntimeError(f"lookback LP failed: {res.message}")
    M = {tree.root: float(res.fun)}
    for u in d1:
        M[u] = float(res.x[im[u]])
        for ch in tree.children(u):
            M[ch] = float(res.x[ic[ch]])
    thresholds = {u: float(res.x[iN[u]]) for u in d1}
    return SolveResult(
        float(res.fun), "LB", "dp-lb-lp", M, {"threshold": thresholds}, {"status": "optimal"}
    )


def _lb_n2_expcone(problem: HedgeProblem) -> SolveResult:
    import cvxpy as cp

    tree, S = problem.tree, problem.benchmark
    p = problem.loss.params[0]
    d1 = tree.date_nodes(1)
    d2 = [c for u in d1 for c in tree.children(u)]
    a1, a2 = problem.alphas
    m1 = cp.Variable(len(d1))
    m2 = cp.Variable(len(d2))
    nn = cp.Variable(len(d1))
    vv = cp.Variable(len(d2))
    im = {u: i for i, u in enumerate(d1)}
    ic = {c: i for i, c in enumerate(d2)}
    cons = []
    for u in d1:
        kids = tree.children(u)
        cons.append(
            cp.sum(cp.hstack([tree.trans_q(c) * m2[ic[c]] for c in kids])) <= m1[im[u]]
        )
        for c in kids:
            cons.append(cp.exp(-p * (m1[im[u]] - S[u])) - 1.0 - a1 <= vv[ic[c]])
            cons.append(cp.exp(-p * (m2[ic[c]] - S[c])) - 1.0 - a2 <= vv[ic[c]])
        cons.append(
            cp.sum(cp.hstack([tree.trans_p(c) * vv[ic[c]] for c in kids])) <= nn[im[u]]
        )
    pw = np.array([tree.prob(u, "P") for u in d1])
    cons.append(pw @ nn <= 0.0)
    qw = np.array([tree.prob(u, "Q") for u in d1])
    prob = cp.Problem(cp.Minimize(qw @ m1), cons)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob.solve(
            solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10,
            max_iter=200,
        )
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        raise InfeasibleError("two-date lookback constraints infeasible")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"lookback cone solve failed: {prob.status}")
    M = {tree.root: float(prob.value)}
    for u in d1:
        M[u] = float(m1.value[im[u]])
        for ch in tree.children(u):
            M[ch] = float(m2.value[ic[ch]])
    thresholds = {u: float(nn.value[im[u]]) for u in d1}
    return SolveResult(
        float(prob.value), "LB", "dp-lb-cone", M, {"threshold": thresholds}, {"status": prob.status}
    )
