"""Heavy-traffic experiment harness: load sweeps toward saturation,
large-input sweeps of the free cell, decay extrapolation, and the
no-mobility reference sweep.

Sweeps emit one audited row per grid point.  Every row re-checks the
stationary flow identity (and, where a fixed point was solved, the
empty-probability residual); rows failing the audit are marked invalid
rather than dropped, and rows whose solve fails carry the failure note.
Asymptotic comparisons are reported next to their reference constants;
conjectured constants populate report columns only and are never
asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .ctmc import (
    StabilityError,
    TruncationBox,
    TruncationFailureError,
    adapt_truncation,
    build_generator,
    f_empty,
    f_mean_x1,
    f_mean_x2,
    stationary_direct,
)
from .fixpoint import (
    NoSolution,
    flow_balance_residual,
    solve_lambda_net,
)
from .models import (
    ConstrainedParams,
    FreeParams,
    free_rates,
    kappa,
    mm1_stationary,
    xi_star,
)

DEFAULT_RHO_GRID = (0.9, 0.99, 0.999, 0.9999)
DEFAULT_LAMBDA_GRID = (25.0, 50.0, 100.0, 200.0)
DEFAULT_TOL_HT = 0.1


@dataclass
class RhoSweepRow:
    """One saturation-sweep point of the balanced cell."""

    rho: float
    rho1: float
    theta: float
    lambda_net: float
    lambda_tot: float
    mean_x1: float
    mean_x2: float
    p_empty: float
    scaled1: float
    scaled2: float
    ratio_tot: float
    conj_pred1: float
    conj_pred2: float
    n1_max: int
    n2_max: int
    boundary_mass: float
    residual_h: float
    residual_prho: float
    valid: bool
    note: str = ""


@dataclass
class LambdaSweepRow:
    """One large-input sweep point of the free cell."""

    lambda_tot: float
    mean_x1_over_lambda: float
    mean_x2_over_lambda: float
    r: float
    r1: float
    inv_theta: float
    kappa_conjecture: float
    xi1_over_theta: float
    xi2_over_theta: float
    r1_cand_direct: float
    r1_cand_decomp: float
    n1_max: int
    n2_max: int
    boundary_mass: float
    residual_h: float
    valid: bool
    note: str = ""


@dataclass
class ThetaZeroRow:
    """One no-mobility sweep point (exchange rate identically zero)."""

    rho: float
    mean_x1: float
    mean_x2: float
    std_x1: float
    std_x2: float
    scaled_mean1: float
    scaled_mean2: float
    scaled_std1: float
    scaled_std2: float
    geometric_max_err: float
    covered_total: int
    n1_max: int
    n2_max: int
    boundary_mass: float
    residual_h: float
    valid: bool
    note: str = ""


@dataclass
class ExtrapolationResult:
    """Least-squares limit of a decay-rate sequence r(lam) ~ r_inf + c*log(lam)/lam."""

    r_inf: float
    coefficient: float
    max_residual: float
    degenerate: bool


def row_header(row_cls) -> list:
    return [f.name for f in fields(row_cls)]


def row_values(row) -> list:
    return [getattr(row, f.name) for f in fields(row)]


def _nan_row(cls, note, **kw):
    vals = {}
    for f in fields(cls):
        if f.name in kw:
            vals[f.name] = kw[f.name]
        elif f.name == "valid":
            vals[f.name] = False
        elif f.name == "note":
            vals[f.name] = note
        elif f.type in ("int",):
            vals[f.name] = 0
        else:
            vals[f.name] = float("nan")
    return cls(**vals)


def sweep_rho(base: ConstrainedParams, rho_grid: Sequence[float] = DEFAULT_RHO_GRID,
              tol: float = 1e-8, tol_ht: float = DEFAULT_TOL_HT) -> list:
    """Solve the balance fixed point along a load grid at fixed class mix.

    The grid point sets lambda1 = p*rho*mu and lambda2 = (1-p)*rho*mu with
    the mix p taken from the base parameters, so the sweep follows the
    simplest saturation path with the mix, service and mobility rates
    pinned.
    """
    lam_sum = base.lambda1 + base.lambda2
    mix = base.lambda1 / lam_sum if lam_sum > 0 else 0.5
    rows = []
    for rho in rho_grid:
        if not 0 < rho < 1:
            raise ValueError("rho grid values must lie in (0, 1)")
        p = ConstrainedParams(mix * rho * base.mu, (1.0 - mix) * rho * base.mu,
                              base.mu, base.theta, base.imbalance_beta)
        log_term = -math.log(1.0 - rho)
        xi = xi_star(p.rho1)
        conj = 1.0 - math.log(1.0 - p.rho1)
        try:
            sol = solve_lambda_net(p, tol=tol)
        except (StabilityError, TruncationFailureError) as exc:
            rows.append(_nan_row(RhoSweepRow, f"solve failed: {exc}",
                                 rho=rho, rho1=p.rho1, theta=p.theta))
            continue
        if isinstance(sol, NoSolution):
            rows.append(_nan_row(RhoSweepRow, f"no solution: {sol.reason}",
                                 rho=rho, rho1=p.rho1, theta=p.theta))
            continue
        free = p.free(sol.lambda_net_star)
        gen = build_generator(free_rates(free), sol.box_used)
        dist = stationary_direct(gen)
        mean_x1, mean_x2 = dist.mean(1), dist.mean(2)
        res_h = flow_balance_residual(free, dist)
        res_prho = abs(dist.prob_empty() - (1.0 - rho))
        audit_ok = (res_h < max(1e-8, 10.0 * dist.boundary_mass)
                    and res_prho < 10.0 * tol)
        rows.append(RhoSweepRow(
            rho=rho, rho1=p.rho1, theta=p.theta,
            lambda_net=sol.lambda_net_star, lambda_tot=sol.lambda_tot_star,
            mean_x1=mean_x1, mean_x2=mean_x2, p_empty=dist.prob_empty(),
            scaled1=mean_x1 / log_term, scaled2=mean_x2 / log_term,
            ratio_tot=sol.lambda_tot_star / log_term,
            conj_pred1=xi.xi1 / conj, conj_pred2=xi.xi2 / conj,
            n1_max=sol.box_used.n1_max, n2_max=sol.box_used.n2_max,
            boundary_mass=dist.boundary_mass,
            residual_h=res_h, residual_prho=res_prho, valid=audit_ok))
    return rows


def sweep_lambda_tot(free_base: FreeParams,
                     lam_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                     tol: float = 1e-8) -> list:
    """Exact solves of the free cell along an increasing total-input grid.

    Reports the per-input scaled means against their limiting direction,
    the empty-state decay rate r against 1/theta and the conjectured
    constant, and the slow-class decay rate r1 against both candidate
    constants (they differ by theta^2 and the sources disagree; neither
    is asserted).
    """
    lam_grid = list(lam_grid)
    if any(b <= a for a, b in zip(lam_grid, lam_grid[1:])):
        raise ValueError("lambda grid must be strictly increasing")
    p0 = free_base
    if p0.theta <= 0:
        raise ValueError("large-input sweep needs theta > 0")
    rho1 = p0.rho1
    rows = []
    for lam_tot in lam_grid:
        lam_net = lam_tot - p0.lambda2
        if lam_net < 0:
            raise ValueError(f"lambda_tot {lam_tot} below lambda2")
        p = FreeParams(p0.lambda1, p0.lambda2, lam_net, p0.mu, p0.theta)
        note = ""
        try:
            box, dist = adapt_truncation(
                free_rates(p),
                {"ex1": f_mean_x1, "ex2": f_mean_x2, "p00": f_empty},
                tol)
        except (StabilityError, TruncationFailureError) as exc:
            rows.append(_nan_row(LambdaSweepRow, f"solve failed: {exc}",
                                 lambda_tot=lam_tot))
            continue
        p00 = dist.prob_empty()
        vals, probs = dist.marginal(1)
        p_x1_zero = float(probs[vals == 0][0])
        res_h = flow_balance_residual(p, dist)
        xi = xi_star(rho1)
        rows.append(LambdaSweepRow(
            lambda_tot=lam_tot,
            mean_x1_over_lambda=dist.mean(1) / lam_tot,
            mean_x2_over_lambda=dist.mean(2) / lam_tot,
            r=-math.log(p00) / lam_tot,
            r1=-math.log(p_x1_zero) / lam_tot,
            inv_theta=1.0 / p.theta,
            kappa_conjecture=kappa(rho1, p.theta),
            xi1_over_theta=xi.xi1 / p.theta,
            xi2_over_theta=xi.xi2 / p.theta,
            r1_cand_direct=-p.theta * math.log(1.0 - rho1),
            r1_cand_decomp=-math.log(1.0 - rho1) / p.theta,
            n1_max=box.n1_max, n2_max=box.n2_max,
            boundary_mass=dist.boundary_mass, residual_h=res_h,
            valid=res_h < max(1e-8, 10.0 * dist.boundary_mass),
            note=note))
    return rows


def decay_extrapolate(lam_values: Sequence[float], r_values: Sequence[float]
                      ) -> ExtrapolationResult:
    """Fit r(lam) = r_inf + c * log(lam)/lam by least squares.

    Needs at least four strictly increasing grid points; inputs are
    sorted and checked first.
    """
    lam = np.asarray(lam_values, dtype=float)
    r = np.asarray(r_values, dtype=float)
    if len(lam) < 4:
        raise ValueError("extrapolation needs at least 4 grid points")
    order = np.argsort(lam)
    lam, r = lam[order], r[order]
    if np.any(np.diff(lam) <= 0):
        raise ValueError("duplicate lambda values")
    design = np.column_stack([np.ones_like(lam), np.log(lam) / lam])
    coef, _, rank, _ = np.linalg.lstsq(design, r, rcond=None)
    degenerate = rank < 2
    resid = r - design @ coef
    return ExtrapolationResult(
        r_inf=float(coef[0]), coefficient=float(coef[1]),
        max_residual=float(np.abs(resid).max()), degenerate=degenerate)


def extrapolate_rows(rows: Sequence[LambdaSweepRow],
                     field_name: str = "r") -> ExtrapolationResult:
    ok = [row for row in rows if row.valid]
    return decay_extrapolate([row.lambda_tot for row in ok],
                             [getattr(row, field_name) for row in ok])


def geometric_tail_box(rho: float, rel_bias: float = 0.05) -> int:
    """Box edge for the no-mobility cell at load rho.

    The total count is geometric, so the box must grow like a multiple of
    the mean: pick the smallest edge K with truncated-tail first-moment
    bias (K+1+m)*rho^(K+1) below rel_bias * m, m the geometric mean.
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    m = rho / (1.0 - rho)
    target = rel_bias * m
    k = int(m) + 1
    while (k + 1 + m) * rho ** (k + 1) > target:
        k = max(k + 1, int(k * 1.1))
    return k


def theta_zero_ht(base: ConstrainedParams,
                  rho_grid: Sequence[float]) -> list:
    """No-mobility sweep: the balance rate is identically zero, so each
    grid point is a single exact solve of the plain two-class PS cell.

    The truncation edge follows the geometric total-count tail (the
    adaptive doubling policy cannot reach tolerance under the state cap
    for loads near one).  Each row reports the rescaled means and spreads
    against the exponential limit values (both one half) and the maximum
    error of the covered total-count law against the geometric law,
    compared conditionally on the covered range, where the match is an
    identity rather than an asymptotic.
    """
    if base.theta != 0:
        raise ValueError("theta_zero_ht requires theta = 0")
    lam_sum = base.lambda1 + base.lambda2
    mix = base.lambda1 / lam_sum if lam_sum > 0 else 0.5
    rows = []
    for rho in rho_grid:
        if not 0 < rho < 1:
            raise ValueError("rho grid values must lie in (0, 1)")
        p = FreeParams(mix * rho * base.mu, (1.0 - mix) * rho * base.mu,
                       0.0, base.mu, 0.0)
        edge = geometric_tail_box(rho)
        box = TruncationBox(edge, edge)
        gen = build_generator(free_rates(p), box)
        dist = stationary_direct(gen)
        scale = 1.0 - rho
        vals, probs = dist.total_count_marginal()
        cover = edge  # totals up to the edge are fully inside the box
        t_probs = probs[:cover + 1]
        geom = mm1_stationary(rho)(np.arange(cover + 1))
        err = float(np.abs(t_probs / t_probs.sum() - geom / geom.sum()).max())
        res_h = flow_balance_residual(p, dist)
        rows.append(ThetaZeroRow(
            rho=rho, mean_x1=dist.mean(1), mean_x2=dist.mean(2),
            std_x1=math.sqrt(dist.var(1)), std_x2=math.sqrt(dist.var(2)),
            scaled_mean1=scale * dist.mean(1),
            scaled_mean2=scale * dist.mean(2),
            scaled_std1=scale * math.sqrt(dist.var(1)),
            scaled_std2=scale * math.sqrt(dist.var(2)),
            geometric_max_err=err, covered_total=cover,
            n1_max=box.n1_max, n2_max=box.n2_max,
            boundary_mass=dist.boundary_mass, residual_h=res_h,
            valid=res_h < max(1e-8, 10.0 * dist.boundary_mass)))
    return rows
