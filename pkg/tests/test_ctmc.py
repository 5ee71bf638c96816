import math

import numpy as np
import pytest

import cellps.ctmc as ctmc
from cellps.ctmc import (
    ModelDefinitionError,
    RateModel,
    ReducibleChainError,
    StabilityError,
    TruncationBox,
    TruncationFailureError,
    adapt_truncation,
    build_generator,
    f_empty,
    f_mean_x1,
    f_mean_x2,
    functional,
    stationary_direct,
    stationary_power,
    tv_distance,
)
from cellps.models import (
    z_empty_probability,
    FreeParams,
    free_rates,
    mm1_rates,
    mm1_stationary,
    mminfty_rates,
    mminfty_stationary,
    z_rates,
)

FREE_TEST = FreeParams(0.3, 0.3, 0.1, 1.0, 1.0)


def test_box_geometry():
    box = TruncationBox(3, 5, offset2=2)
    assert box.span1 == 4 and box.span2 == 8
    assert box.lo2 == -2 and box.n_states == 32
    assert box.contains(0, -2) and box.contains(3, 5)
    assert not box.contains(4, 0) and not box.contains(0, -3)
    x1, x2 = box.state_arrays()
    assert len(x1) == 32
    assert box.index_of(x1, x2).tolist() == list(range(32))


def test_box_validation():
    with pytest.raises(ValueError):
        TruncationBox(-1, 3)
    with pytest.raises(ValueError):
        TruncationBox(0, 0)  # a single state is not a chain


def test_mm1_generator_structure():
    # birth-death chain on a 4-state box is tridiagonal with zero row sums
    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(3, 0))
    assert gen.n_states == 4
    dense = gen.offdiag.toarray()
    assert dense[0, 1] == 1.0 and dense[1, 0] == 2.0
    assert np.count_nonzero(dense) == 6
    assert np.all(np.abs(np.triu(dense, 2)) == 0)
    assert np.all(gen.row_sums() == 0.0)
    assert gen.bandwidth == 1


def test_free_model_empty_state_only_arrivals():
    model = free_rates(FREE_TEST)
    trans = model.transitions((0, 0))
    assert sorted(t for t, _ in trans) == [(0, 1), (1, 0)]
    rates = dict(trans)
    assert rates[(1, 0)] == pytest.approx(0.3)
    assert rates[(0, 1)] == pytest.approx(0.4)


def test_z_bottom_state_reflects():
    model = z_rates(FreeParams(0.5, 10.0, 0.0, 1.0, 1.0), k=3)
    trans = model.transitions((0, -3))
    assert [t for t, _ in trans] == [(0, -2)]  # downward rate theta*(k+z)=0


def test_mm1_matches_geometric():
    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(60, 0))
    dist = stationary_direct(gen)
    pmf = mm1_stationary(0.5)
    errs = [abs(dist.prob(j) - float(pmf(j))) for j in range(61)]
    assert max(errs) < 1e-12
    dist.validate()


def test_mminfty_matches_poisson():
    gen = build_generator(mminfty_rates(10.0, 1.0), TruncationBox(44, 0))
    dist = stationary_direct(gen)
    pmf = mminfty_stationary(10.0)
    errs = [abs(dist.prob(j) - float(pmf(j))) for j in range(45)]
    assert max(errs) < 1e-10


def test_z_matches_shifted_poisson():
    p = FreeParams(0.5, 10.0, 0.0, 1.0, 1.0)
    k = 3
    gen = build_generator(z_rates(p, k), TruncationBox(0, 45, offset2=k))
    dist = stationary_direct(gen)
    a = p.lambda_tot / p.theta
    pmf = mminfty_stationary(a)
    # state z corresponds to a shifted-Poisson count of z + k
    for z in (-k, -1, 0, 5, 20):
        assert dist.prob(0, z) == pytest.approx(float(pmf(z + k)), abs=1e-10)


def test_deep_tail_relative_accuracy_birth_death():
    # probabilities spanning ~270 orders of magnitude keep small relative
    # error: that is the point of the cancellation-free elimination
    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(900, 0))
    dist = stationary_direct(gen)
    for j in (100, 500, 900):
        ratio = dist.prob(j) / dist.prob(0)
        assert ratio == pytest.approx(0.5 ** j, rel=1e-10)


def test_deep_tail_relative_accuracy_shifted_minorant():
    # empty-state probability ~ 4e-42 against the closed form, relatively
    p = FreeParams(0.5, 100.0, 0.0, 1.0, 1.0)
    k = 1
    gen = build_generator(z_rates(p, k), TruncationBox(0, 220, offset2=k))
    dist = stationary_direct(gen)
    exact = z_empty_probability(p, k)
    assert exact < 1e-40
    assert dist.prob(0, 0) == pytest.approx(exact, rel=1e-9)


def test_negative_rate_rejected():
    model = RateModel(lambda s: [((s[0] + 1, 0), -1.0)], tag="bad")
    with pytest.raises(ModelDefinitionError):
        build_generator(model, TruncationBox(3, 0))


def test_self_transition_rejected():
    model = RateModel(lambda s: [(s, 1.0)], tag="loop")
    with pytest.raises(ModelDefinitionError):
        build_generator(model, TruncationBox(3, 0))


def test_reducible_chain_reported():
    # pure-death chain: states above 0 are never entered
    def transitions(s):
        return [((s[0] - 1, 0), 1.0)] if s[0] > 0 else []

    gen = build_generator(RateModel(transitions, tag="death"),
                          TruncationBox(4, 0))
    with pytest.raises(ReducibleChainError):
        stationary_direct(gen)

    # a state that cannot reach down at all
    def transitions_up(s):
        return [((s[0] + 1, 0), 1.0)] if s[0] < 4 else []

    gen = build_generator(RateModel(transitions_up, tag="up"),
                          TruncationBox(4, 0))
    with pytest.raises(ReducibleChainError):
        stationary_direct(gen)


def test_power_agrees_with_direct_mm1():
    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(60, 0))
    dd = stationary_direct(gen)
    dp = stationary_power(gen, 1e-10)
    assert tv_distance(dd, dp) < 1e-9


def test_power_agrees_with_direct_free_model():
    model = free_rates(FREE_TEST)
    box, dd = adapt_truncation(
        model, {"ex2": f_mean_x2, "p00": f_empty}, 1e-8)
    gen = build_generator(model, box)
    dp = stationary_power(gen, 1e-9)
    assert tv_distance(dd, dp) < 1e-8


def test_power_agrees_with_direct_on_shifted_box():
    p = FreeParams(0.5, 10.0, 0.0, 1.0, 1.0)
    gen = build_generator(z_rates(p, 2), TruncationBox(0, 45, offset2=2))
    dd = stationary_direct(gen)
    dp = stationary_power(gen, 1e-9)
    assert tv_distance(dd, dp) < 1e-8


def test_power_fixed_point_of_uniformized_step():
    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(40, 0))
    tol = 1e-9
    dist = stationary_power(gen, tol)
    lam = 1.02 * gen.exit_rates.max()
    import scipy.sparse as sp

    P = (gen.offdiag / lam + sp.diags(1.0 - gen.exit_rates / lam)).tocsr()
    stepped = P.T @ dist.p
    assert 0.5 * np.abs(stepped - dist.p).sum() < tol


def test_numpy_kernels_match_numba(monkeypatch):
    if not ctmc.HAVE_NUMBA:
        pytest.skip("numba not installed")
    model = free_rates(FREE_TEST)
    box = TruncationBox(25, 25)
    gen = build_generator(model, box)
    fast = stationary_direct(gen)
    monkeypatch.setattr(ctmc, "USE_NUMBA", False)
    slow = stationary_direct(gen)
    assert tv_distance(fast, slow) < 1e-13


def test_adapt_subcritical_mm1_terminates():
    box, dist = adapt_truncation(mm1_rates(1.0, 2.0), {"ex": f_mean_x1}, 1e-8)
    assert dist.boundary_mass < 1e-8
    assert dist.mean(1) == pytest.approx(1.0, abs=1e-7)


def test_adapt_transient_free_model_errors():
    p = FreeParams(1.5, 0.3, 0.1, 1.0, 1.0)  # static load above one
    with pytest.raises(StabilityError):
        adapt_truncation(free_rates(p), {"ex": f_mean_x2}, 1e-8)


def test_adapt_large_input_box_scale():
    # class-2 box edge must clear the mean by several standard deviations
    p = FreeParams(0.5, 0.0, 50.0, 1.0, 1.0)
    box, dist = adapt_truncation(
        free_rates(p), {"ex2": f_mean_x2, "p00": f_empty}, 1e-8)
    assert box.n2_max >= 50 + 3 * math.sqrt(50)
    assert dist.mean(2) == pytest.approx(50.0, rel=0.05)


def test_adapt_tol_shrinks_functional_change():
    model = free_rates(FREE_TEST)
    changes = []
    for tol in (1e-4, 1e-6, 1e-8):
        box, dist = adapt_truncation(model, {"ex2": f_mean_x2}, tol)
        hist = dist.adapt_history
        assert len(hist) >= 2
        last = hist[-1]["values"]["ex2"]
        prev = hist[-2]["values"]["ex2"]
        changes.append(abs(last - prev))
    assert changes[0] >= changes[1] >= changes[2]


def test_adapt_cap_exceeded():
    p = FreeParams(0.5, 0.0, 50.0, 1.0, 1.0)
    with pytest.raises(TruncationFailureError):
        adapt_truncation(free_rates(p), {"ex2": f_mean_x2}, 1e-8,
                         state_cap=500)


def test_adapt_hint_is_stable():
    model = free_rates(FREE_TEST)
    box1, _ = adapt_truncation(model, {"ex2": f_mean_x2}, 1e-8)
    box2, _ = adapt_truncation(model, {"ex2": f_mean_x2}, 1e-8, box_hint=box1)
    assert box2 == box1


def test_functional_indicator_on_mm1():
    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(60, 0))
    dist = stationary_direct(gen)
    val = functional(dist, f_empty)
    assert val == pytest.approx(0.5, abs=1e-10)


def test_functional_mean_on_mminfty():
    gen = build_generator(mminfty_rates(10.0, 1.0), TruncationBox(50, 0))
    dist = stationary_direct(gen)
    assert functional(dist, f_mean_x1) == pytest.approx(10.0, abs=1e-8)


def test_functional_total_count_theta_zero():
    # with no mobility the total count is a single-server queue at the
    # full load; at rho = 0.9 the mean is rho/(1-rho) = 9
    p = FreeParams(0.45, 0.45, 0.0, 1.0, 0.0)
    gen = build_generator(free_rates(p), TruncationBox(220, 220))
    dist = stationary_direct(gen)
    total = functional(dist, lambda a, b: (a + b).astype(float))
    assert total == pytest.approx(9.0, abs=1e-6)


def test_boundary_mass_definition():
    gen = build_generator(free_rates(FREE_TEST), TruncationBox(12, 14))
    dist = stationary_direct(gen)
    manual = dist.p[(dist.x1 == 12) | (dist.x2 == 14)].sum()
    assert dist.boundary_mass == pytest.approx(float(manual), abs=1e-15)


def test_stationary_normalization_and_sign():
    gen = build_generator(free_rates(FREE_TEST), TruncationBox(20, 20))
    dist = stationary_direct(gen)
    assert abs(math.fsum(dist.p) - 1.0) < 1e-12
    assert dist.p.min() >= 0.0


def test_tv_distance_requires_same_box():
    g1 = build_generator(mm1_rates(1.0, 2.0), TruncationBox(10, 0))
    g2 = build_generator(mm1_rates(1.0, 2.0), TruncationBox(12, 0))
    with pytest.raises(ValueError):
        tv_distance(stationary_direct(g1), stationary_direct(g2))


def test_marginals_and_moments():
    gen = build_generator(free_rates(FREE_TEST), TruncationBox(25, 25))
    dist = stationary_direct(gen)
    vals, probs = dist.marginal(1)
    assert vals[0] == 0 and abs(probs.sum() - 1.0) < 1e-12
    assert np.dot(vals, probs) == pytest.approx(dist.mean(1))
    tvals, tprobs = dist.total_count_marginal()
    assert np.dot(tvals, tprobs) == pytest.approx(dist.mean(1) + dist.mean(2))
