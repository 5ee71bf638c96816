"""Balance fixed point: choose the network exchange rate so that mobile
flows to and from the rest of the network cancel.

The balance condition lambda_net = beta * theta * E[X2] is solved through
its empty-probability form: for beta = 1 the stationary flow identity

    Q = 1 - rho - lambda_net/mu + (theta/mu) * E[X2]

makes the balance equivalent to Q(lambda_net) = 1 - rho, and Q is
continuous and strictly decreasing in lambda_net, so a bracket-and-bisect
search is exact and robust to solver noise.  Every solve is audited
against the flow identity afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

from .ctmc import (
    StabilityError,
    TruncationBox,
    TruncatedDistribution,
    adapt_truncation,
    f_empty,
    f_mean_x1,
    f_mean_x2,
)
from .models import (
    POSITIVE_RECURRENT,
    ConstrainedParams,
    FreeParams,
    free_rates,
    stability_classify,
)

DEFAULT_TOL = 1e-8
# Inner truncation tolerance relative to the solver tolerance.
INNER_TOL_FACTOR = 0.01
MAX_BRACKET_DOUBLINGS = 60


class BracketError(RuntimeError):
    """No sign change found for the balance residual."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class NoSolution:
    """The balance equation has no solution at these parameters."""

    reason: str
    rho: float


@dataclass
class FixedPointSolution:
    """Solved exchange rate plus both residual forms and the search trace."""

    lambda_net_star: float
    lambda_tot_star: float
    residual_prho: float
    residual_fp: float
    bracket_history: list
    box_used: TruncationBox
    mean_x2: float
    p_empty: float
    boundary_mass: float
    imbalance_beta: float = 1.0


@dataclass
class _FreeSolve:
    params: FreeParams
    dist: TruncatedDistribution
    box: TruncationBox
    q: float
    mean_x1: float
    mean_x2: float


def _solve_free(p: FreeParams, tol: float,
                box_hint: Optional[TruncationBox] = None) -> _FreeSolve:
    if stability_classify(p) != POSITIVE_RECURRENT:
        raise StabilityError(
            f"free model not positive recurrent (theta={p.theta}, "
            f"rho1={p.rho1:.6g}, rho+lambda_net/mu="
            f"{p.rho + p.lambda_net / p.mu:.6g})")
    model = free_rates(p)
    box, dist = adapt_truncation(
        model, {"ex1": f_mean_x1, "ex2": f_mean_x2, "p00": f_empty},
        tol, box_hint=box_hint)
    return _FreeSolve(params=p, dist=dist, box=box, q=dist.prob_empty(),
                      mean_x1=dist.mean(1), mean_x2=dist.mean(2))


def q_of(lambda_net: float, p: ConstrainedParams,
         tol: float = DEFAULT_TOL,
         box_hint: Optional[TruncationBox] = None) -> float:
    """Empty-cell probability of the free model at a given exchange rate."""
    return _solve_free(p.free(lambda_net), tol * INNER_TOL_FACTOR,
                       box_hint=box_hint).q


def flow_balance_residual(p: FreeParams, dist: TruncatedDistribution) -> float:
    """Residual of the stationary flow identity on a solved table."""
    q = dist.prob_empty()
    rhs = (1.0 - p.rho - p.lambda_net / p.mu
           + (p.theta / p.mu) * dist.mean(2))
    return abs(q - rhs)


def verify_flow_balance(p: FreeParams, tol: float = 1e-10) -> float:
    """Solve the free model and return the flow-identity residual."""
    solve = _solve_free(p, tol)
    return flow_balance_residual(p, solve.dist)


def flow_balance_report(p: FreeParams, tol: float = 1e-10) -> dict:
    """Residual plus the truncation-aware acceptance threshold."""
    solve = _solve_free(p, tol)
    residual = flow_balance_residual(p, solve.dist)
    threshold = max(1e-8, 10.0 * solve.dist.boundary_mass)
    return {
        "residual": residual,
        "threshold": threshold,
        "ok": residual < threshold,
        "boundary_mass": solve.dist.boundary_mass,
        "box": solve.box,
    }


def solve_lambda_net(p: ConstrainedParams,
                     tol: float = DEFAULT_TOL
                     ) -> Union[FixedPointSolution, NoSolution]:
    """Solve the balance equation for the exchange rate.

    For beta = 1 the root is found on the empty-probability form
    Q(lambda_net) = 1 - rho; for other beta the raw balance residual
    lambda_net - beta*theta*E[X2] is bracketed and bisected instead, with
    no uniqueness claim.  Bisection is used throughout because each
    evaluation is a truncated solve with noise far below tol but not zero.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    inner_tol = tol * INNER_TOL_FACTOR

    if p.theta == 0:
        if p.rho >= 1:
            return NoSolution(
                reason="theta = 0 and rho >= 1: free model not positive "
                       "recurrent, balance equation undefined", rho=p.rho)
        solve = _solve_free(p.free(0.0), inner_tol)
        return FixedPointSolution(
            lambda_net_star=0.0, lambda_tot_star=p.lambda2,
            residual_prho=abs(solve.q - (1.0 - p.rho)), residual_fp=0.0,
            bracket_history=[(0.0, solve.q)], box_used=solve.box,
            mean_x2=solve.mean_x2, p_empty=solve.q,
            boundary_mass=solve.dist.boundary_mass,
            imbalance_beta=p.imbalance_beta)

    if p.rho1 >= 1:
        raise StabilityError(
            f"rho1 = {p.rho1:.6g} >= 1: free model unstable for every "
            "exchange rate")
    if p.imbalance_beta == 1.0 and p.rho >= 1:
        return NoSolution(
            reason="rho >= 1 with theta > 0: empty probability is positive "
                   "but the balance form requires it to equal 1 - rho",
            rho=p.rho)

    history = []
    box_hint = None

    def eval_point(lam):
        nonlocal box_hint
        solve = _solve_free(p.free(lam), inner_tol, box_hint=box_hint)
        box_hint = solve.box
        history.append((lam, solve.q))
        return solve

    if p.imbalance_beta == 1.0:
        target = 1.0 - p.rho

        def residual(s):
            return s.q - target
    else:
        def residual(s):
            return s.params.lambda_net - p.imbalance_beta * p.theta * s.mean_x2

    lo_lam = 0.0
    lo_solve = eval_point(0.0)
    res_lo = residual(lo_solve)
    if p.imbalance_beta == 1.0:
        # Q decreases in lambda_net, so the residual decreases: root above 0
        # needs a positive residual at 0 (equality means the root is 0).
        decreasing = True
        if res_lo < -tol:
            raise BracketError(
                f"empty probability at lambda_net=0 already below target "
                f"1-rho = {target:.6g}", history)
    else:
        decreasing = False
        if res_lo > tol:
            raise BracketError(
                "balance residual positive at lambda_net=0", history)

    # Analytic bracket ceilings from the class-2 flow bounds
    # lambda_tot - mu <= theta * E[X2] <= lambda_tot: beyond them the
    # balance residual provably keeps its sign, so searching further only
    # burns ever-larger solves.
    beta = p.imbalance_beta
    if beta == 1.0:
        u_cap = math.inf
    elif beta < 1.0:
        u_cap = beta * p.lambda2 / (1.0 - beta) + 1.0
    else:
        u_cap = max(beta * (p.mu - p.lambda2), 0.0) / (beta - 1.0) + 1.0

    if abs(res_lo) < tol:
        final = lo_solve
        lam_star = 0.0
    else:
        hi_lam = max(p.mu * (1.0 - p.rho), tol)
        hi_solve = None
        for _ in range(MAX_BRACKET_DOUBLINGS):
            if hi_lam > u_cap:
                raise BracketError(
                    f"no sign change possible beyond lambda_net = "
                    f"{u_cap:.6g} (imbalance {beta}); no solution found",
                    history)
            hi_solve = eval_point(hi_lam)
            res_hi = residual(hi_solve)
            if (res_hi < 0) if decreasing else (res_hi > 0):
                break
            if abs(res_hi) < tol:
                break
            hi_lam = min(2.0 * hi_lam, u_cap) if hi_lam < u_cap else 2.0 * hi_lam
        else:
            raise BracketError(
                f"no sign change up to lambda_net = {hi_lam:.6g}", history)

        lam_star, final = hi_lam, hi_solve
        res = residual(hi_solve)
        if abs(res) >= tol:
            lo, hi = lo_lam, hi_lam
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                mid_solve = eval_point(mid)
                res = residual(mid_solve)
                lam_star, final = mid, mid_solve
                if abs(res) < tol:
                    break
                if (res > 0) == decreasing:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-15 * max(1.0, hi):
                    raise BracketError(
                        f"bracket collapsed at [{lo:.17g}, {hi:.17g}] with "
                        f"residual {res:.3g} above tol", history)
            else:
                raise BracketError("bisection iteration cap reached", history)

    return FixedPointSolution(
        lambda_net_star=lam_star,
        lambda_tot_star=p.lambda2 + lam_star,
        residual_prho=abs(final.q - (1.0 - p.rho)),
        residual_fp=abs(lam_star - p.imbalance_beta * p.theta * final.mean_x2),
        bracket_history=history,
        box_used=final.box,
        mean_x2=final.mean_x2,
        p_empty=final.q,
        boundary_mass=final.dist.boundary_mass,
        imbalance_beta=p.imbalance_beta)
