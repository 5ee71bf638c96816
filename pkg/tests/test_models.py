import math

import numpy as np
import pytest

from cellps.models import (
    NULL_RECURRENT,
    POSITIVE_RECURRENT,
    TRANSIENT,
    ConstrainedParams,
    CouplingParams,
    FreeParams,
    alpha_rate,
    beta_rate,
    free_rates,
    joint_rates,
    kappa,
    m_of,
    mm1_sandwich_loads,
    mm1_stationary,
    mminfty_stationary,
    stability_classify,
    xi_star,
    yprime_rates,
    ytilde_rates,
    z_empty_probability,
    z_rates,
)


def rates_at(model, state):
    return dict(model.transitions(state))


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------


def test_free_params_derived():
    p = FreeParams(0.3, 0.2, 0.1, 2.0, 1.0)
    assert p.rho1 == pytest.approx(0.15)
    assert p.rho2 == pytest.approx(0.1)
    assert p.rho == pytest.approx(0.25)
    assert p.lambda_tot == pytest.approx(0.3)


def test_param_validation():
    with pytest.raises(ValueError):
        FreeParams(0.3, 0.3, 0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        FreeParams(-0.1, 0.3, 0.1, 1.0, 1.0)
    with pytest.raises(ValueError):
        ConstrainedParams(0.3, 0.3, 1.0, 1.0, imbalance_beta=0.0)
    with pytest.raises(ValueError):
        CouplingParams(FreeParams(0.3, 0.3, 0.1, 1.0, 0.0))  # theta = 0


def test_coupling_threshold_integer_ceiling():
    c = CouplingParams(FreeParams(0.3, 0.3, 0.8, 1.0, 0.7), epsilon=0.1)
    assert c.ell == math.ceil(1.1 * 1.1 / 0.7)
    assert isinstance(c.ell, int) and c.ell >= 1


# ---------------------------------------------------------------------------
# Transition tables at pinned states
# ---------------------------------------------------------------------------


def test_free_rates_table():
    p = FreeParams(0.3, 0.3, 0.1, 1.0, 0.5)
    r = rates_at(free_rates(p), (2, 2))
    assert r[(1, 2)] == pytest.approx(0.5)        # mu * 2/4
    assert r[(2, 1)] == pytest.approx(0.5 + 1.0)  # mu * 2/4 + theta * 2

    p2 = FreeParams(0.3, 0.3, 0.1, 1.0, 1.0)
    r2 = rates_at(free_rates(p2), (0, 5))
    assert r2[(0, 4)] == pytest.approx(6.0)       # mu * 5/5 + theta * 5
    assert (0, 6) in r2 and (1, 5) in r2
    assert len(r2) == 3  # no class-1 departure from an empty class


def test_ytilde_drops_class2_service():
    p = FreeParams(0.3, 0.3, 0.1, 1.0, 1.0)
    r = rates_at(ytilde_rates(p), (1, 1))
    assert r[(1, 0)] == pytest.approx(1.0)   # theta * y2 only
    assert r[(0, 1)] == pytest.approx(0.5)   # mu * y1/(y1+y2)
    assert rates_at(free_rates(p), (1, 1))[(1, 0)] == pytest.approx(1.5)
    assert rates_at(ytilde_rates(p), (0, 0)).keys() == {(1, 0), (0, 1)}


def test_yprime_threshold():
    c = CouplingParams(FreeParams(0.3, 0.3, 0.8, 1.0, 0.7), epsilon=0.1)
    ell = c.ell
    model = yprime_rates(c)
    above = rates_at(model, (3, ell + 1))
    assert (2, ell + 1) not in above  # service switched off above threshold
    at = rates_at(model, (ell, ell))
    assert at[(ell - 1, ell)] == pytest.approx(c.base.mu / 2)


def test_yprime_class2_is_infinite_server():
    base = FreeParams(0.4, 0.3, 0.9, 1.0, 0.6)
    c = CouplingParams(base, epsilon=0.2)
    model = yprime_rates(c)
    for y1, y2 in ((0, 0), (2, 1), (5, 7)):
        r = rates_at(model, (y1, y2))
        assert r[(y1, y2 + 1)] == pytest.approx(base.lambda_tot)
        if y2 > 0:
            assert r[(y1, y2 - 1)] == pytest.approx(base.theta * y2)


def test_yprime_mobile_marginal_is_poisson():
    # solved exactly, the throttled cell's mobile coordinate carries the
    # infinite-server law regardless of the class-1 throttling
    from cellps.ctmc import TruncationBox, build_generator, stationary_direct

    base = FreeParams(0.5, 0.5, 2.5, 1.0, 1.0)
    c = CouplingParams(base, epsilon=0.2)
    gen = build_generator(yprime_rates(c), TruncationBox(40, 30))
    dist = stationary_direct(gen)
    vals, probs = dist.marginal(2)
    ref = mminfty_stationary(base.lambda_tot / base.theta)(vals)
    assert np.abs(probs - ref).max() < 1e-9


def test_joint_rates_algebra_at_pinned_state():
    base = FreeParams(0.3, 0.3, 0.9, 1.0, 0.7)
    c = CouplingParams(base, epsilon=0.1)
    assert c.ell == 2
    assert float(alpha_rate(1, 2)) == pytest.approx(1 / 3)
    assert float(beta_rate(1, 1, 2)) == pytest.approx(1 / 6)
    assert float(alpha_rate(2, 2)) == pytest.approx(1 / 2)
    assert float(beta_rate(1, 1, 2) + alpha_rate(1, 2)) == pytest.approx(
        float(alpha_rate(2, 2)))

    model = joint_rates(c)
    r = rates_at(model, (1, 2, 1))  # y2 = 1 <= ell
    assert r[(0, 1, 1)] == pytest.approx(base.mu / 3)      # joint decrease
    assert r[(1, 1, 1)] == pytest.approx(base.mu / 6)      # lone big decrease
    r_hi = rates_at(model, (1, 2, c.ell + 1))               # above threshold
    assert (0, 1, c.ell + 1) not in r_hi
    assert r_hi[(0, 2, c.ell + 1)] == pytest.approx(base.mu / 3)


def test_joint_rates_no_lone_departure_when_equal():
    c = CouplingParams(FreeParams(0.3, 0.3, 0.9, 1.0, 0.7), epsilon=0.1)
    r = rates_at(joint_rates(c), (2, 2, 1))
    assert (2, 1, 1) not in r  # beta_0 = 0


def test_joint_rates_domain_error():
    c = CouplingParams(FreeParams(0.3, 0.3, 0.9, 1.0, 0.7), epsilon=0.1)
    with pytest.raises(ValueError):
        joint_rates(c).transitions((3, 2, 1))


def test_z_rates_guard_and_closed_form():
    p = FreeParams(0.5, 10.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        z_rates(p, 0)  # k below mu/theta
    assert z_empty_probability(p, 1) == pytest.approx(10.0 * math.exp(-10.0))


# ---------------------------------------------------------------------------
# Stability classification
# ---------------------------------------------------------------------------


def test_stability_theta_zero_uses_total_input_load():
    p = FreeParams(0.3, 0.3, 0.2, 1.0, 0.0)  # rho + lambda_net/mu = 0.8
    assert stability_classify(p) == POSITIVE_RECURRENT
    assert stability_classify(FreeParams(0.3, 0.3, 0.4, 1.0, 0.0)) == NULL_RECURRENT
    assert stability_classify(FreeParams(0.3, 0.3, 0.5, 1.0, 0.0)) == TRANSIENT


def test_stability_theta_positive_uses_static_load_only():
    assert stability_classify(FreeParams(1.0, 0.3, 0.1, 1.0, 1.0)) == NULL_RECURRENT
    assert stability_classify(FreeParams(1.1, 0.3, 0.1, 1.0, 1.0)) == TRANSIENT
    # a huge mobile load is irrelevant when theta > 0
    assert stability_classify(FreeParams(0.9, 5.0, 3.0, 1.0, 1.0)) == POSITIVE_RECURRENT


def test_stability_independent_of_mobile_rates():
    rng = np.random.default_rng(5)
    for _ in range(25):
        lam1 = float(rng.uniform(0.1, 1.4))
        theta = float(rng.uniform(0.1, 2.0))
        ref = stability_classify(FreeParams(lam1, 0.0, 0.0, 1.0, theta))
        lam2 = float(rng.uniform(0.0, 5.0))
        lam_net = float(rng.uniform(0.0, 5.0))
        assert stability_classify(
            FreeParams(lam1, lam2, lam_net, 1.0, theta)) == ref


# ---------------------------------------------------------------------------
# Derived constants
# ---------------------------------------------------------------------------


def test_xi_star_values():
    assert xi_star(0.5).xi1 == pytest.approx(1.0)
    assert xi_star(0.5).xi2 == 1.0
    assert xi_star(0.0).xi1 == 0.0
    assert xi_star(0.9).xi1 == pytest.approx(9.0)
    rho1 = 0.123456
    assert xi_star(rho1).xi1 == rho1 / (1.0 - rho1)
    assert xi_star(1 - 1e-12).xi1 > 1e11
    with pytest.raises(ValueError):
        xi_star(1.0)


def test_kappa_values():
    assert kappa(0.0, 1.0) == pytest.approx(1.0)
    assert kappa(0.5, 2.0) == pytest.approx((1.0 - math.log(0.5)) / 2.0)
    with pytest.raises(ValueError):
        kappa(1.0, 1.0)
    with pytest.raises(ValueError):
        kappa(0.5, 0.0)


def test_total_count_prefactor():
    assert m_of(1.0) == pytest.approx(1.0)
    # x - x log x increases on (0, 1], so the prefactor decreases
    assert m_of(0.5) < m_of(0.25)
    with pytest.raises(ValueError):
        m_of(0.0)


def test_sandwich_loads():
    lp, lm = mm1_sandwich_loads(0.5, 0.1)
    assert lp == pytest.approx(1.05 / 1.1)
    assert lm == pytest.approx(0.9 / 0.95)
    assert mm1_sandwich_loads(0.5, 1.0)[0] == pytest.approx(0.75)
    for eps in (0.5, 0.1, 0.01, 0.001):
        lp, lm = mm1_sandwich_loads(0.37, eps)
        assert lp < 1 and lm < 1
    lp, lm = mm1_sandwich_loads(0.37, 1e-9)
    assert lp == pytest.approx(1.0, abs=1e-8)
    assert lm == pytest.approx(1.0, abs=1e-8)


def test_closed_form_laws():
    pmf = mm1_stationary(0.5)
    assert float(pmf(0)) == pytest.approx(0.5)
    assert float(pmf(3)) == pytest.approx(0.5 ** 4)
    grid = np.arange(0, 400)
    pw = mminfty_stationary(10.0)
    probs = pw(grid)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.dot(grid, probs) == pytest.approx(10.0, abs=1e-10)
    assert np.dot((grid - 10.0) ** 2, probs) == pytest.approx(10.0, abs=1e-8)
    with pytest.raises(ValueError):
        mm1_stationary(1.0)


# ---------------------------------------------------------------------------
# Rate algebra of the throttled service split
# ---------------------------------------------------------------------------


def test_rate_algebra_identity_random_battery():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(200):
        ell = int(rng.integers(1, 1001))
        y = rng.integers(0, 1001, size=50)
        d = rng.integers(0, 1001, size=50)
        err = np.abs(beta_rate(y, d, ell) + alpha_rate(y, ell)
                     - alpha_rate(y + d, ell)).max()
        worst = max(worst, float(err))
    assert worst < 2e-15


def test_rate_algebra_shape():
    y = np.arange(0, 500)
    for ell in (1, 7, 100):
        a = alpha_rate(y, ell)
        assert np.all(np.diff(a) > 0)            # increasing in y
        b1 = beta_rate(y, 3, ell)
        assert np.all(np.diff(b1) < 0)           # decreasing in y
        deltas = np.arange(0, 50)
        bd = beta_rate(5, deltas, ell)
        assert np.all(np.diff(bd) > 0)           # increasing in delta
        assert float(beta_rate(123, 0, ell)) == 0.0


def test_free_dominates_ytilde_class2_departure():
    p = FreeParams(0.4, 0.3, 0.2, 1.3, 0.8)
    fm, ym = free_rates(p), ytilde_rates(p)
    for x1 in range(0, 15):
        for x2 in range(0, 15):
            f = rates_at(fm, (x1, x2)).get((x1, x2 - 1), 0.0)
            y = rates_at(ym, (x1, x2)).get((x1, x2 - 1), 0.0)
            assert f >= y
