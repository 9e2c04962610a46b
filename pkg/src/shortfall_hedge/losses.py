"""Convex decreasing loss functions and the multiplier equation they induce.

Two built-in families: the call loss max(-x, 0) and the exponential loss
exp(-p*x) - 1.  The exponential family carries the full analytic kit
(derivative, inverse derivative, Legendre transform, generalized inverse)
needed by the smooth recursions; the call loss deliberately refuses the
inverse derivative, since its derivative is not invertible.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .trees import AdaptedProcess, ScenarioTree

__all__ = [
    "LossError",
    "NotSmoothLossError",
    "RootBracketError",
    "LossFunction",
    "make_call_loss",
    "make_exponential_loss",
    "make_custom_loss",
    "check_loss_shape",
    "solve_lambda",
]


class LossError(ValueError):
    pass


class NotSmoothLossError(LossError):
    """Operation needs the smooth-loss apparatus (strict convexity, C1,
    Inada derivative limits) which this loss does not provide."""


class RootBracketError(LossError):
    """The multiplier equation could not be bracketed: the tolerance lies
    below the loss attainable given the floor, i.e. the constraint is
    infeasible at this node."""


@dataclass(frozen=True)
class LossFunction:
    """Bundle of l and the analytic pieces operations may require.

    Optional pieces are None when unavailable; accessors raise rather than
    silently finite-differencing.
    """

    kind: str
    eval_fn: Callable = field(repr=False)
    inf_limit: float
    derivative_fn: Callable | None = field(default=None, repr=False)
    inverse_derivative_fn: Callable | None = field(default=None, repr=False)
    legendre_fn: Callable | None = field(default=None, repr=False)
    generalized_inverse_fn: Callable | None = field(default=None, repr=False)
    params: tuple = ()

    def __call__(self, x):
        return self.eval_fn(x)

    @property
    def smooth(self) -> bool:
        """Whether the strict-convexity/Inada package is available."""
        return self.inverse_derivative_fn is not None

    def derivative(self, x):
        if self.derivative_fn is None:
            raise NotSmoothLossError(f"{self.kind} loss provides no derivative")
        return self.derivative_fn(x)

    def inverse_derivative(self, y):
        """I(y) for y < 0, the inverse of l' where it exists."""
        if self.inverse_derivative_fn is None:
            raise NotSmoothLossError(
                f"{self.kind} loss is not strictly convex and smooth: "
                "inverse derivative unavailable"
            )
        return self.inverse_derivative_fn(y)

    def legendre(self, u):
        """l*(u) = inf_v {l(v) - u v}; -inf where the infimum diverges."""
        if self.legendre_fn is None:
            raise NotSmoothLossError(f"{self.kind} loss provides no Legendre transform")
        return self.legendre_fn(u)

    def generalized_inverse(self, alpha):
        """Smallest x with l(x) <= alpha; +inf when no x qualifies."""
        if self.generalized_inverse_fn is None:
            raise NotSmoothLossError(f"{self.kind} loss provides no generalized inverse")
        return self.generalized_inverse_fn(alpha)


def make_call_loss() -> LossFunction:
    """l(x) = max(-x, 0): shortfall below zero, no reward for overshoot."""

    def ev(x):
        return np.maximum(-np.asarray(x, dtype=float), 0.0)

    def deriv(x):
        # fixed subgradient selection: -1 on x <= 0, 0 on x > 0
        x = np.asarray(x, dtype=float)
        return np.where(x > 0.0, 0.0, -1.0)

    def legendre(u):
        u = np.asarray(u, dtype=float)
        return np.where((u >= -1.0) & (u <= 0.0), 0.0, -np.inf)

    def geninv(alpha):
        alpha = np.asarray(alpha, dtype=float)
        return np.where(alpha >= 0.0, -alpha, np.inf)

    return LossFunction(
        kind="call",
        eval_fn=ev,
        inf_limit=0.0,
        derivative_fn=deriv,
        inverse_derivative_fn=None,
        legendre_fn=legendre,
        generalized_inverse_fn=geninv,
    )


def make_exponential_loss(p: float) -> LossFunction:
    """l(x) = exp(-p x) - 1 with p > 0; fully smooth with Inada limits."""
    if not p > 0.0:
        raise LossError(f"exponential loss needs p > 0, got {p}")

    def ev(x):
        return np.exp(-p * np.asarray(x, dtype=float)) - 1.0

    def deriv(x):
        return -p * np.exp(-p * np.asarray(x, dtype=float))

    def inv_deriv(y):
        y = np.asarray(y, dtype=float)
        if np.any(y >= 0.0):
            raise LossError("inverse derivative defined on y < 0 only")
        return -np.log(-y / p) / p

    def legendre(u):
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            interior = -u / p - 1.0 + (u / p) * np.log(-u / p)
        return np.where(u < 0.0, interior, np.where(u == 0.0, -1.0, -np.inf))

    def geninv(alpha):
        alpha = np.asarray(alpha, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = -np.log1p(alpha) / p
        return np.where(alpha > -1.0, val, np.inf)

    return LossFunction(
        kind="exponential",
        eval_fn=ev,
        inf_limit=-1.0,
        derivative_fn=deriv,
        inverse_derivative_fn=inv_deriv,
        legendre_fn=legendre,
        generalized_inverse_fn=geninv,
        params=(p,),
    )


def make_custom_loss(
    eval_fn: Callable,
    inf_limit: float,
    derivative_fn: Callable | None = None,
    inverse_derivative_fn: Callable | None = None,
    legendre_fn: Callable | None = None,
    generalized_inverse_fn: Callable | None = None,
) -> LossFunction:
    """Wrap a user loss.  Only the pieces supplied are available; operations
    that need a missing piece fail loudly instead of approximating it."""
    return LossFunction(
        kind="custom",
        eval_fn=eval_fn,
        inf_limit=float(inf_limit),
        derivative_fn=derivative_fn,
        inverse_derivative_fn=inverse_derivative_fn,
        legendre_fn=legendre_fn,
        generalized_inverse_fn=generalized_inverse_fn,
    )


def check_loss_shape(loss: LossFunction, grid: np.ndarray | None = None, tol: float = 1e-12) -> bool:
    """Sampled convexity / monotone-decrease / bounded-below check."""
    if grid is None:
        grid = np.linspace(-20.0, 20.0, 401)
    v = np.asarray(loss(grid), dtype=float)
    if np.any(np.diff(v) > tol * np.maximum(1.0, np.abs(v[:-1]))):
        return False
    # midpoint convexity on consecutive triples
    mid = loss((grid[:-2] + grid[2:]) / 2.0)
    if np.any(mid > (v[:-2] + v[2:]) / 2.0 + 1e-9 * np.maximum(1.0, np.abs(v[2:]))):
        return False
    return bool(np.all(np.isfinite(v)))


def _lambda_equation(loss, p_vec, ratio, floor_vec, alpha):
    """Return g(s) = E_P[l(I(-exp(s) * ratio) v floor)] - alpha at one node."""

    def g(s):
        lam = -math.exp(s)
        arg = loss.inverse_derivative(lam * ratio)
        arg = np.maximum(arg, floor_vec)
        return float(np.dot(p_vec, loss(arg))) - alpha

    return g


def solve_lambda(
    tree: ScenarioTree,
    loss: LossFunction,
    k: int,
    alpha_k: float,
    floor: Mapping | None = None,
    nodes: list[str] | None = None,
    residual_tol: float = 1e-10,
    max_expand: int = 60,
) -> AdaptedProcess:
    """Per-node negative multiplier solving the one-step tolerance equation.

    At each requested date-(k-1) node the equation
    E_P[ l( I(lambda * Z_k/Z_{k-1}) v floor ) | node ] = alpha_k
    is solved for lambda < 0.  The left side decreases from E_P[l(floor)]
    to the loss's limit at +inf as lambda rises to 0, so a sign change is
    found on a geometrically expanded bracket in log(-lambda); the caller
    must skip nodes where the floor already meets the tolerance.
    """
    if not loss.smooth:
        raise NotSmoothLossError("multiplier equation needs the inverse derivative")
    if not alpha_k > loss.inf_limit:
        raise LossError(f"tolerance {alpha_k} not above loss limit {loss.inf_limit}")
    if not 1 <= k <= tree.n_dates:
        raise LossError(f"date {k} out of range 1..{tree.n_dates}")
    if nodes is None:
        nodes = tree.date_nodes(k - 1)
    floor_vals = None if floor is None else dict(floor)

    out: dict[str, float] = {}
    for u in nodes:
        kids = tree.children(u)
        p_vec = np.array([tree.trans_p(c) for c in kids])
        ratio = np.array([tree.trans_q(c) / tree.trans_p(c) for c in kids])
        if floor_vals is None:
            f_vec = np.full(len(kids), -np.inf)
        else:
            f_vec = np.array([floor_vals[c] for c in kids])
        g = _lambda_equation(loss, p_vec, ratio, f_vec, alpha_k)
        # bracket in s = log(-lambda); g is increasing in s
        s_lo, s_hi = math.log(1e-8), math.log(1e8)
        expand = 0
        while g(s_lo) > 0.0 and expand < max_expand:
            s_lo -= math.log(10.0)
            expand += 1
        while g(s_hi) < 0.0 and expand < max_expand:
            s_hi += math.log(10.0)
            expand += 1
        if g(s_lo) > 0.0 or g(s_hi) < 0.0:
            raise RootBracketError(
                f"root not bracketed at node {u!r}: tolerance {alpha_k} below "
                "attainable loss given the floor"
            )
        s_star = brentq(g, s_lo, s_hi, xtol=1e-14, rtol=8.9e-16, maxiter=300)
        if abs(g(s_star)) > residual_tol:
            raise LossError(f"multiplier residual {g(s_star):.2e} at node {u!r}")
        out[u] = -math.exp(s_star)
    return AdaptedProcess(out)
