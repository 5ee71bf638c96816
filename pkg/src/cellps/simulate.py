"""Exact event-driven simulation: single paths, the three-way pathwise
coupling, and regeneration-cycle statistics.

Randomness comes from numpy's PCG64 seeded through SeedSequence.  The
coupled construction spawns four named substreams from the root seed
(event clocks, service selection, small-system tie-break, mobility
victim) so coupled runs are reproducible and each component keeps its
marginal law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .ctmc import RateModel
from .models import CouplingParams, joint_rates


@dataclass(frozen=True)
class SimConfig:
    """Simulation run parameters; horizons count events, not time, so a
    fixed seed always yields the same trace length."""

    seed: int
    horizon_events: int
    warmup_events: Optional[int] = None
    batch_count: int = 32

    def __post_init__(self):
        if self.horizon_events <= 0:
            raise ValueError("horizon_events must be positive")
        if self.batch_count < 10:
            raise ValueError("batch_count must be at least 10")
        if self.warmup_events is not None and \
                self.warmup_events >= self.horizon_events:
            raise ValueError("warmup must be below the horizon")

    @property
    def warmup(self) -> int:
        if self.warmup_events is not None:
            return self.warmup_events
        return self.horizon_events // 5


@dataclass
class Estimate:
    """Time-average estimate with a batch-means confidence half-width."""

    value: float
    half_width: float
    batches: int


@dataclass
class SimResult:
    times: np.ndarray
    states: np.ndarray
    estimates: dict
    absorbed: bool
    total_time: float


@dataclass
class CouplingTrace:
    """Jump-indexed joint states of the coupled triple.

    Columns of ``states``: small (x1, x2), middle (y1, y2), outer
    (y1', y2').  ``codes`` records the event type per jump: 0 class-1
    arrival, 1 class-2 arrival, 2 service ring, 3 mobility ring.
    """

    times: np.ndarray
    states: np.ndarray
    codes: np.ndarray
    dominance_ok: bool
    first_violation: Optional[int]
    estimates_small: dict


@dataclass
class CycleStats:
    """Per-cycle records of the joint chain regenerating at the threshold."""

    ell: int
    sigma: np.ndarray
    tau: np.ndarray
    sigma_next: np.ndarray
    z: np.ndarray
    z_prime: np.ndarray
    delta: np.ndarray
    reward_small: np.ndarray
    reward_big: np.ndarray
    cycle_length: np.ndarray
    tau_leg: np.ndarray
    sigma_leg: np.ndarray
    partial: bool
    events_used: int
    warmup_cycles: int


def _time_average_estimates(times, states, warmup, batch_count):
    """Batch-means time averages per coordinate plus the empty-state
    fraction, over the post-warmup window."""
    n_events = len(times) - 1
    if n_events <= warmup + batch_count:
        raise ValueError("horizon too short for the requested warmup/batches")
    dt = np.diff(times)[warmup:]
    vals = states[warmup:-1]
    total = dt.sum()
    dims = vals.shape[1]
    edges = np.linspace(0, len(dt), batch_count + 1).astype(int)
    tcrit = stats.t.ppf(0.975, batch_count - 1)

    def batched(series):
        means = np.empty(batch_count)
        for b in range(batch_count):
            s = slice(edges[b], edges[b + 1])
            means[b] = np.dot(series[s], dt[s]) / dt[s].sum()
        value = float(np.dot(series, dt) / total)
        hw = float(tcrit * means.std(ddof=1) / math.sqrt(batch_count))
        return Estimate(value, hw, batch_count)

    out = {}
    for d in range(dims):
        out[f"x{d + 1}"] = batched(vals[:, d].astype(float))
    out["p_empty"] = batched((vals == 0).all(axis=1).astype(float))
    return out, float(total)


def time_average_of(times, states, fn, warmup: int,
                    batch_count: int = 32) -> Estimate:
    """Batch-means time average of fn(state-row) over the post-warmup window."""
    dt = np.diff(times)[warmup:]
    series = np.array([fn(s) for s in states[warmup:-1]], dtype=float)
    edges = np.linspace(0, len(dt), batch_count + 1).astype(int)
    tcrit = stats.t.ppf(0.975, batch_count - 1)
    means = np.empty(batch_count)
    for b in range(batch_count):
        s = slice(edges[b], edges[b + 1])
        means[b] = np.dot(series[s], dt[s]) / dt[s].sum()
    value = float(np.dot(series, dt) / dt.sum())
    hw = float(tcrit * means.std(ddof=1) / math.sqrt(batch_count))
    return Estimate(value, hw, batch_count)


def simulate_path(model: RateModel, init: tuple, cfg: SimConfig) -> SimResult:
    """Exact jump-chain path: exponential holding at the total exit rate,
    jump target chosen proportionally to its rate."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    n = cfg.horizon_events
    state = tuple(init)
    dims = len(state)
    times = np.zeros(n + 1)
    states = np.zeros((n + 1, dims), dtype=np.int64)
    states[0] = state
    t = 0.0
    absorbed = False
    # Draw in blocks: one exponential and one uniform per event.
    block = 8192
    exps = rng.exponential(size=block)
    unis = rng.random(size=block)
    bpos = block
    n_done = 0
    for ev in range(n):
        trans = model.transitions(state)
        total = 0.0
        for _, r in trans:
            total += r
        if total <= 0.0:
            absorbed = True
            break
        if bpos >= block:
            exps = rng.exponential(size=block)
            unis = rng.random(size=block)
            bpos = 0
        t += exps[bpos] / total
        u = unis[bpos] * total
        bpos += 1
        acc = 0.0
        for target, r in trans:
            acc += r
            if u < acc:
                state = target
                break
        else:
            state = trans[-1][0]
        times[ev + 1] = t
        states[ev + 1] = state
        n_done = ev + 1
    times = times[:n_done + 1]
    states = states[:n_done + 1]
    if absorbed and n_done < cfg.warmup + 2 * cfg.batch_count:
        # absorption cut the path too short for batching
        return SimResult(times=times, states=states, estimates={},
                         absorbed=True, total_time=float(times[-1]))
    estimates, total_time = _time_average_estimates(
        times, states, cfg.warmup, cfg.batch_count)
    return SimResult(times=times, states=states, estimates=estimates,
                     absorbed=absorbed, total_time=total_time)


def simulate_coupled(c: CouplingParams, cfg: SimConfig) -> CouplingTrace:
    """Build the cell, its relaxed majorant and the threshold-throttled
    majorant on one probability space and record componentwise dominance.

    Construction (one event at a time):
      * both arrival streams feed all three systems;
      * every mobile customer carries one mobility clock, shared by every
        system holding that customer (small mobile stock is a subset of
        the common middle/outer stock);
      * a single service ring at rate mu picks a customer uniformly in the
        middle system via one uniform draw; the small system removes the
        same customer when it holds it and an independently chosen one
        otherwise; the outer system thins the same draw against its
        throttled service fraction, which nests inside the middle event
        exactly when the thresholds allow it.
    """
    p, ell = c.base, c.ell
    lam1, lamtot, mu, theta = p.lambda1, p.lambda_tot, p.mu, p.theta
    ss = np.random.SeedSequence(cfg.seed)
    r_events, r_select, r_extra, r_theta = (
        np.random.default_rng(s) for s in ss.spawn(4))

    x1: list = []
    x2: list = []
    x1set: set = set()
    x2set: set = set()
    ty1: list = []
    ty1set: set = set()
    y2: list = []          # shared middle/outer mobile customers
    y1p = 0
    next_id = 0

    n = cfg.horizon_events
    times = np.zeros(n + 1)
    states = np.zeros((n + 1, 6), dtype=np.int64)
    codes = np.zeros(n, dtype=np.int8)
    first_violation = None
    t = 0.0
    for ev in range(n):
        y2c = len(y2)
        total = lam1 + lamtot + mu + theta * y2c
        t += r_events.exponential(1.0 / total)
        u = r_events.random() * total
        if u < lam1:
            codes[ev] = 0
            cid = next_id
            next_id += 1
            x1.append(cid)
            x1set.add(cid)
            ty1.append(cid)
            ty1set.add(cid)
            y1p += 1
        elif u < lam1 + lamtot:
            codes[ev] = 1
            cid = next_id
            next_id += 1
            x2.append(cid)
            x2set.add(cid)
            y2.append(cid)
        elif u < lam1 + lamtot + mu:
            codes[ev] = 2
            usel = r_select.random()
            if y2c <= ell and y1p > 0 and usel < y1p / (y1p + ell):
                y1p -= 1
            big = len(ty1) + y2c
            if big > 0:
                idx = min(int(usel * big), big - 1)
                if idx < len(ty1):
                    cid = ty1.pop(idx)
                    ty1set.discard(cid)
                    in_small = cid in x1set
                    small_class1 = True
                else:
                    cid = y2[idx - len(ty1)]
                    in_small = cid in x2set
                    small_class1 = False
                ns = len(x1) + len(x2)
                if in_small:
                    if small_class1:
                        x1.remove(cid)
                        x1set.discard(cid)
                    else:
                        x2.remove(cid)
                        x2set.discard(cid)
                elif ns > 0:
                    j = min(int(r_extra.random() * ns), ns - 1)
                    if j < len(x1):
                        gone = x1.pop(j)
                        x1set.discard(gone)
                    else:
                        gone = x2.pop(j - len(x1))
                        x2set.discard(gone)
        else:
            codes[ev] = 3
            v = min(int(r_theta.random() * y2c), y2c - 1)
            vid = y2.pop(v)
            if vid in x2set:
                x2.remove(vid)
                x2set.discard(vid)
        times[ev + 1] = t
        row = (len(x1), len(x2), len(ty1), len(y2), y1p, len(y2))
        states[ev + 1] = row
        ok = (row[0] <= row[2] <= row[4]) and (row[1] <= row[3])
        if not ok and first_violation is None:
            first_violation = ev + 1

    estimates, _ = _time_average_estimates(
        times, states[:, :2], cfg.warmup, cfg.batch_count)
    return CouplingTrace(
        times=times, states=states, codes=codes,
        dominance_ok=first_violation is None,
        first_violation=first_violation,
        estimates_small=estimates)


def cycle_statistics(c: CouplingParams, n_cycles: int, cfg: SimConfig,
                     phi: Callable[[int], float] = lambda x: float(min(x, 20)),
                     warmup_cycles: Optional[int] = None) -> CycleStats:
    """Simulate the joint chain and carve its path into threshold cycles.

    A cycle opens when the mobile count sits at the threshold, passes its
    tau mark at the first excursion above, and closes on the return.  Per
    cycle we record the starting pair, their gap, both reward integrals
    of phi and the leg lengths.  If the event cap ends the run early the
    result is flagged partial.
    """
    if n_cycles <= 0:
        raise ValueError("n_cycles must be positive")
    model = joint_rates(c)
    ell = c.ell
    if warmup_cycles is None:
        warmup_cycles = max(10, n_cycles // 10)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    p = c.base
    z0 = int(round(p.rho1 / (1.0 - p.rho1) * ell)) if p.rho1 < 1 else 0
    state = (z0, z0, ell)

    want = n_cycles + warmup_cycles
    sigmas, taus, sig_next = [], [], []
    zs, zps, r_small, r_big = [], [], [], []
    t = 0.0
    cycle_start = 0.0
    tau_t = None
    acc_small = 0.0
    acc_big = 0.0
    zs_cur = state[0]
    zp_cur = state[1]
    events = 0
    for ev in range(cfg.horizon_events):
        trans = model.transitions(state)
        total = sum(r for _, r in trans)
        dt = rng.exponential(1.0 / total)
        u = rng.random() * total
        acc = 0.0
        new_state = trans[-1][0]
        for target, r in trans:
            acc += r
            if u < acc:
                new_state = target
                break
        acc_small += phi(state[0]) * dt
        acc_big += phi(state[1]) * dt
        t += dt
        events = ev + 1
        y2_new = new_state[2]
        if tau_t is None and y2_new == ell + 1:
            tau_t = t
        elif tau_t is not None and y2_new == ell:
            sigmas.append(cycle_start)
            taus.append(tau_t)
            sig_next.append(t)
            zs.append(zs_cur)
            zps.append(zp_cur)
            r_small.append(acc_small)
            r_big.append(acc_big)
            cycle_start = t
            tau_t = None
            acc_small = 0.0
            acc_big = 0.0
            zs_cur = new_state[0]
            zp_cur = new_state[1]
            if len(sigmas) >= want:
                state = new_state
                break
        state = new_state

    partial = len(sigmas) < want
    w = min(warmup_cycles, max(len(sigmas) - 1, 0))
    sigma = np.array(sigmas[w:])
    tau = np.array(taus[w:])
    nxt = np.array(sig_next[w:])
    z = np.array(zs[w:], dtype=np.int64)
    zp = np.array(zps[w:], dtype=np.int64)
    return CycleStats(
        ell=ell, sigma=sigma, tau=tau, sigma_next=nxt, z=z, z_prime=zp,
        delta=zp - z,
        reward_small=np.array(r_small[w:]),
        reward_big=np.array(r_big[w:]),
        cycle_length=nxt - sigma,
        tau_leg=tau - sigma,
        sigma_leg=nxt - tau,
        partial=partial, events_used=events, warmup_cycles=w)


def first_passage_samples(up_rate: float, down_rate: Callable[[int], float],
                          start: int, stop_at: int, n_samples: int,
                          seed: int) -> np.ndarray:
    """Hitting times of a birth-death chain, one independent run each.

    Used for the renewal identities: leg lengths of the threshold cycles
    are compared against independently simulated passage times.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = np.empty(n_samples)
    for i in range(n_samples):
        s = start
        t = 0.0
        while s != stop_at:
            up = up_rate
            down = down_rate(s)
            total = up + down
            t += rng.exponential(1.0 / total)
            if rng.random() * total < up:
                s += 1
            else:
                s -= 1
        out[i] = t
    return out


def batch_ratio_estimate(numerators: np.ndarray, denominators: np.ndarray,
                         batches: int = 20) -> Estimate:
    """Ratio-of-means estimate with a batch standard error."""
    n = len(numerators)
    if n < batches:
        raise ValueError("not enough samples for the requested batches")
    edges = np.linspace(0, n, batches + 1).astype(int)
    vals = np.array([
        numerators[edges[b]:edges[b + 1]].sum()
        / denominators[edges[b]:edges[b + 1]].sum()
        for b in range(batches)])
    value = float(numerators.sum() / denominators.sum())
    se = float(vals.std(ddof=1) / math.sqrt(batches))
    return Estimate(value, se, batches)


def mean_with_se(samples: np.ndarray) -> Estimate:
    return Estimate(float(samples.mean()),
                    float(samples.std(ddof=1) / math.sqrt(len(samples))),
                    len(samples))
