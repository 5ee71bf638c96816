"""Model catalogue: the two-class PS cell, its comparison processes, and
closed-form reference laws.

Every process is packaged as a :class:`~cellps.ctmc.RateModel` so the same
engine can solve or simulate it.  Class 1 holds the static users, class 2
the mobile ones; the mobile class is fed by the outside arrivals plus the
network exchange rate, and drains through both processor sharing and the
per-user mobility clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from .ctmc import RateModel

POSITIVE_RECURRENT = "positive_recurrent"
NULL_RECURRENT = "null_recurrent"
TRANSIENT = "transient"


@dataclass(frozen=True)
class FreeParams:
    """Parameters of the unconstrained cell: arrival rates per class, the
    network exchange rate feeding class 2, the service rate and the
    mobility rate."""

    lambda1: float
    lambda2: float
    lambda_net: float
    mu: float
    theta: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        for name in ("lambda1", "lambda2", "lambda_net", "theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def rho1(self) -> float:
        return self.lambda1 / self.mu

    @property
    def rho2(self) -> float:
        return self.lambda2 / self.mu

    @property
    def rho(self) -> float:
        return self.rho1 + self.rho2

    @property
    def lambda_tot(self) -> float:
        return self.lambda2 + self.lambda_net

    def with_lambda_net(self, lambda_net: float) -> "FreeParams":
        return FreeParams(self.lambda1, self.lambda2, lambda_net,
                          self.mu, self.theta)


@dataclass(frozen=True)
class ConstrainedParams:
    """Parameters of the balanced cell; the exchange rate is determined by
    the solver, optionally scaled by an imbalance factor (default 1 means
    flows to and from the rest of the network cancel exactly)."""

    lambda1: float
    lambda2: float
    mu: float
    theta: float
    imbalance_beta: float = 1.0

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("arrival rates must be nonnegative")
        if self.imbalance_beta <= 0:
            raise ValueError("imbalance_beta must be positive")

    @property
    def rho1(self) -> float:
        return self.lambda1 / self.mu

    @property
    def rho2(self) -> float:
        return self.lambda2 / self.mu

    @property
    def rho(self) -> float:
        return self.rho1 + self.rho2

    def free(self, lambda_net: float) -> FreeParams:
        return FreeParams(self.lambda1, self.lambda2, lambda_net,
                          self.mu, self.theta)


@dataclass(frozen=True)
class CouplingParams:
    """Coupling construction parameters: base cell plus the threshold slack.

    The class-2 threshold is ceil((1+epsilon) * lambda_tot / theta),
    rounded up to an integer so it stays above the class-2 equilibrium.
    """

    base: FreeParams
    epsilon: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.base.theta <= 0:
            raise ValueError("coupling constructions need theta > 0")
        if self.base.lambda_tot <= 0:
            raise ValueError("coupling constructions need lambda_tot > 0")

    @property
    def ell(self) -> int:
        return int(math.ceil((1.0 + self.epsilon) * self.base.lambda_tot
                             / self.base.theta))


@dataclass(frozen=True)
class XiStar:
    """Limiting direction of the rescaled stationary state."""

    xi1: float
    xi2: float


def xi_star(rho1: float) -> XiStar:
    """Scaling direction (rho1/(1-rho1), 1) for static load below one."""
    if not 0 <= rho1 < 1:
        raise ValueError("rho1 must lie in [0, 1)")
    return XiStar(rho1 / (1.0 - rho1), 1.0)


def kappa(rho1: float, theta: float) -> float:
    """Conjectured decay constant (1 - log(1-rho1)) / theta.

    Feeds report columns only; never asserted against solves.
    """
    if not 0 <= rho1 < 1:
        raise ValueError("rho1 must lie in [0, 1)")
    if theta <= 0:
        raise ValueError("theta must be positive")
    return (1.0 - math.log(1.0 - rho1)) / theta


def m_of(x: float) -> float:
    """Total-count prefactor 1 / (x - x log x) on (0, 1].

    x - x log x is increasing there, so m_of decreases: a larger mobile
    fraction shrinks the predicted total population.
    """
    if not 0 < x <= 1:
        raise ValueError("x must lie in (0, 1]")
    return 1.0 / (x - x * math.log(x))


def mm1_sandwich_loads(rho1: float, epsilon: float):
    """Loads of the bounding single-server queues used around the slow class.

    Both are strictly below one: ((1+eps*rho1)/(1+eps), (1-eps)/(1-eps*rho1)).
    """
    if not 0 < rho1 < 1:
        raise ValueError("rho1 must lie in (0, 1)")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if epsilon * rho1 >= 1:
        raise ValueError("epsilon * rho1 must be below one")
    load_plus = (1.0 + epsilon * rho1) / (1.0 + epsilon)
    load_minus = (1.0 - epsilon) / (1.0 - epsilon * rho1)
    return load_plus, load_minus


# ---------------------------------------------------------------------------
# Rate models
# ---------------------------------------------------------------------------


def stability_classify(p: FreeParams) -> str:
    """Recurrence class of the unconstrained cell.

    With no mobility the drift criterion uses the full input load
    rho + lambda_net/mu; with mobility only the static load rho1 matters
    because class 2 always drains at rate theta per user.
    """
    crit = p.rho + p.lambda_net / p.mu if p.theta == 0 else p.rho1
    if crit < 1:
        return POSITIVE_RECURRENT
    if crit == 1:
        return NULL_RECURRENT
    return TRANSIENT


def _free_guess(p: FreeParams):
    if p.theta > 0:
        g2 = p.lambda_tot / p.theta
        g1 = (p.rho1 / (1.0 - p.rho1)) * (g2 + 1.0) if p.rho1 < 1 else None
        return g1, g2
    load = p.rho + p.lambda_net / p.mu
    if load >= 1:
        return None, None
    total = load / (1.0 - load)
    lam_all = p.lambda1 + p.lambda_tot
    share1 = p.lambda1 / lam_all if lam_all > 0 else 0.5
    return total * share1, total * (1.0 - share1)


def free_rates(p: FreeParams) -> RateModel:
    """Two-class PS cell with impatient class 2.

    At (x1, x2): class-i arrivals at lambda_i (class 2 also receives the
    network rate); departures at mu * x_i/(x1+x2), plus theta per class-2
    user.  Service terms vanish with the class, so the empty state only
    has arrivals.
    """
    lam1, lamtot, mu, theta = p.lambda1, p.lambda_tot, p.mu, p.theta

    def transitions(s):
        x1, x2 = s
        n = x1 + x2
        out = []
        if lam1 > 0:
            out.append(((x1 + 1, x2), lam1))
        if lamtot > 0:
            out.append(((x1, x2 + 1), lamtot))
        if x1 > 0:
            out.append(((x1 - 1, x2), mu * x1 / n))
        if x2 > 0:
            out.append(((x1, x2 - 1), mu * x2 / n + theta * x2))
        return out

    stable = stability_classify(p) == POSITIVE_RECURRENT
    return RateModel(transitions, tag="free", moment_guess=_free_guess(p),
                     stable=stable)


def ytilde_rates(p: FreeParams) -> RateModel:
    """Upper-bounding cell: class 2 keeps only its mobility departures.

    Dropping the class-2 service term inflates class 2, which in turn
    slows class-1 service, so this chain dominates the free one.
    """
    lam1, lamtot, mu, theta = p.lambda1, p.lambda_tot, p.mu, p.theta

    def transitions(s):
        y1, y2 = s
        n = y1 + y2
        out = []
        if lam1 > 0:
            out.append(((y1 + 1, y2), lam1))
        if lamtot > 0:
            out.append(((y1, y2 + 1), lamtot))
        if y1 > 0:
            out.append(((y1 - 1, y2), mu * y1 / n))
        if y2 > 0:
            out.append(((y1, y2 - 1), theta * y2))
        return out

    stable = p.theta > 0 and p.rho1 < 1
    guess = None
    if stable:
        g2 = p.lambda_tot / p.theta
        guess = ((p.rho1 / (1.0 - p.rho1)) * (g2 + 1.0), g2)
    return RateModel(transitions, tag="ytilde", moment_guess=guess,
                     stable=stable)


def yprime_rates(c: CouplingParams) -> RateModel:
    """Outer bounding cell: class-1 service throttled by the threshold.

    Class-1 departs at mu*y1/(y1+ell) only while y2 <= ell; class 2 is a
    pure infinite-server queue, so its stationary law is Poisson with
    mean lambda_tot/theta.
    """
    p, ell = c.base, c.ell
    lam1, lamtot, mu, theta = p.lambda1, p.lambda_tot, p.mu, p.theta

    def transitions(s):
        y1, y2 = s
        out = []
        if lam1 > 0:
            out.append(((y1 + 1, y2), lam1))
        out.append(((y1, y2 + 1), lamtot))
        if y1 > 0 and y2 <= ell:
            out.append(((y1 - 1, y2), mu * y1 / (y1 + ell)))
        if y2 > 0:
            out.append(((y1, y2 - 1), theta * y2))
        return out

    stable = p.rho1 < 1
    guess = None
    if stable:
        guess = ((p.rho1 / (1.0 - p.rho1)) * ell + 1.0, p.lambda_tot / p.theta)
    return RateModel(transitions, tag="yprime", moment_guess=guess,
                     stable=stable)


def alpha_rate(y, ell):
    """Throttled service fraction y / (y + ell)."""
    y = np.asarray(y, dtype=float)
    return y / (y + ell)


def beta_rate(y, delta, ell):
    """Extra departure fraction alpha(y+delta) - alpha(y) in closed form:
    ell*delta / ((y+ell)(y+ell+delta)), zero at delta = 0."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    return ell * delta / ((y + ell) * (y + ell + delta))


def joint_rates(c: CouplingParams) -> RateModel:
    """Joint chain (y1, y1', y2) coupling the throttled cell to its
    birth-death minorant, on the wedge y1' >= y1.

    The lone y1' departure rate beta closes the algebra
    beta_{y1'-y1}(y1) + alpha(y1) = alpha(y1'), so the (y1', y2) marginal
    moves exactly like the outer bounding cell while y1 stays below y1'.
    """
    p, ell = c.base, c.ell
    lam1, lamtot, mu, theta = p.lambda1, p.lambda_tot, p.mu, p.theta

    def transitions(s):
        y1, y1p, y2 = s
        if y1p < y1:
            raise ValueError(f"state {s} outside the wedge y1' >= y1")
        out = []
        out.append(((y1, y1p, y2 + 1), lamtot))
        if y2 > 0:
            out.append(((y1, y1p, y2 - 1), theta * y2))
        if lam1 > 0:
            out.append(((y1 + 1, y1p + 1, y2), lam1))
        if y1 > 0:
            a = float(alpha_rate(y1, ell))
            if y2 <= ell:
                out.append(((y1 - 1, y1p - 1, y2), mu * a))
            else:
                out.append(((y1 - 1, y1p, y2), mu * a))
        if y1p > y1 and y2 <= ell:
            b = float(beta_rate(y1, y1p - y1, ell))
            out.append(((y1, y1p - 1, y2), mu * b))
        return out

    return RateModel(transitions, tag="joint", moment_guess=None,
                     stable=p.rho1 < 1)


def z_rates(p: FreeParams, k: int) -> RateModel:
    """Shifted one-dimensional minorant of the mobile class.

    Lives on {-k, -k+1, ...} along the second axis: up at lambda_tot,
    down at theta*(k+z), which vanishes at the floor z = -k.  Valid as a
    lower bound only when k >= mu/theta.
    """
    if p.theta <= 0:
        raise ValueError("z model needs theta > 0")
    if k < p.mu / p.theta:
        raise ValueError(f"k = {k} below mu/theta = {p.mu / p.theta}; "
                         "bound invalid")
    lamtot, theta = p.lambda_tot, p.theta

    def transitions(s):
        x1, z = s
        out = [((x1, z + 1), lamtot)]
        if z > -k:
            out.append(((x1, z - 1), theta * (k + z)))
        return out

    return RateModel(transitions, tag="z", stable=True,
                     moment_guess=(None, lamtot / theta), offset2=k)


def mm1_rates(lam: float, mu: float) -> RateModel:
    """Single-server queue on the first axis (reference model)."""

    def transitions(s):
        x, _ = s
        out = [((x + 1, 0), lam)]
        if x > 0:
            out.append(((x - 1, 0), mu))
        return out

    stable = lam < mu
    guess = (lam / (mu - lam), None) if stable else None
    return RateModel(transitions, tag="mm1", moment_guess=guess, stable=stable)


def mminfty_rates(lam: float, theta: float) -> RateModel:
    """Infinite-server queue on the first axis (reference model)."""
    if theta <= 0:
        raise ValueError("theta must be positive")

    def transitions(s):
        x, _ = s
        out = [((x + 1, 0), lam)]
        if x > 0:
            out.append(((x - 1, 0), theta * x))
        return out

    return RateModel(transitions, tag="mminfty",
                     moment_guess=(lam / theta, None), stable=True)


# ---------------------------------------------------------------------------
# Closed-form reference laws
# ---------------------------------------------------------------------------


def mm1_stationary(load: float):
    """Geometric stationary pmf of the single-server queue, as a callable."""
    if not 0 <= load < 1:
        raise ValueError("load must lie in [0, 1)")

    def pmf(n):
        n = np.asarray(n, dtype=float)
        return (1.0 - load) * load ** n

    return pmf


def mminfty_stationary(a: float):
    """Poisson stationary pmf of the infinite-server queue, as a callable."""
    if a < 0:
        raise ValueError("a must be nonnegative")

    def pmf(n):
        n = np.asarray(n, dtype=float)
        return np.exp(xlogy(n, a) - a - gammaln(n + 1.0))

    return pmf


def z_empty_probability(p: FreeParams, k: int) -> float:
    """Closed-form probability that the shifted minorant sits at zero:
    exp(-a) a^k / k! with a = lambda_tot/theta."""
    a = p.lambda_tot / p.theta
    return float(np.exp(xlogy(k, a) - a - gammaln(k + 1.0)))
