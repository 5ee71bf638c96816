"""Truncated-lattice CTMC engine: generators, stationary solves, adaptive boxes.

Chains live on a finite rectangular window of the two-dimensional integer
lattice (one axis may be degenerate, so ordinary birth-death chains fit
too).  Transitions that would leave the window are dropped, i.e. the
boundary reflects; the probability mass sitting on the outermost layer is
recorded with every solve so the truncation error stays visible.

The direct solver is a banded, cancellation-free state-elimination scheme:
states are censored one at a time from the top of the enumeration, the
eliminated state's exit weight is recomputed as a sum of the remaining
off-diagonal rates at every step, and the stationary vector is rebuilt by
back-substitution from stored incoming columns.  No subtraction ever
occurs, so probabilities spanning hundreds of orders of magnitude keep
small relative error.  A uniformized power iteration is provided as an
independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on numba-free installs
    HAVE_NUMBA = False

# Flipped in tests to exercise the pure-numpy kernels.
USE_NUMBA = HAVE_NUMBA

DEFAULT_FUNCTIONAL_TOL = 1e-8
STATE_CAP = 2**20
# Hard ceiling on the column-store of the banded eliminator (bytes).
BAND_MEMORY_CAP = 6 * 10**9


class ModelDefinitionError(ValueError):
    """A rate model returned an invalid transition (negative rate, self-loop)."""


class ReducibleChainError(RuntimeError):
    """The generator is not irreducible on the box."""

    def __init__(self, state, message):
        super().__init__(message)
        self.state = state


class StabilityError(RuntimeError):
    """Operation requires a positive recurrent model."""


class TruncationFailureError(RuntimeError):
    """Adaptive truncation hit the state cap before converging."""

    def __init__(self, message, history):
        super().__init__(message)
        # Last two (box, functional-values, boundary_mass) records observed.
        self.history = history


class PowerIterationError(RuntimeError):
    """Power iteration did not converge within the iteration cap."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class TruncationBox:
    """Rectangular truncation window x1 in [0, n1_max], x2 in [-offset2, n2_max].

    offset2 shifts the lower edge of the second axis below zero; it is 0
    for every model except the shifted one-dimensional comparison chain.
    """

    n1_max: int
    n2_max: int
    offset2: int = 0

    def __post_init__(self):
        if self.n1_max < 0 or self.n2_max < 0 or self.offset2 < 0:
            raise ValueError(f"invalid box {self}")
        if self.n_states < 2:
            raise ValueError("box must contain at least two states")

    @property
    def span1(self) -> int:
        return self.n1_max + 1

    @property
    def span2(self) -> int:
        return self.n2_max + self.offset2 + 1

    @property
    def lo2(self) -> int:
        return -self.offset2

    @property
    def n_states(self) -> int:
        return self.span1 * self.span2

    def contains(self, x1: int, x2: int) -> bool:
        return 0 <= x1 <= self.n1_max and self.lo2 <= x2 <= self.n2_max

    def index_of(self, x1, x2):
        """Canonical (x1-major) flat index; vectorizes over arrays."""
        return x1 * self.span2 + (x2 + self.offset2)

    def state_arrays(self):
        """Coordinate arrays of all box states in canonical order."""
        x1 = np.repeat(np.arange(self.span1), self.span2)
        x2 = np.tile(np.arange(self.span2) - self.offset2, self.span1)
        return x1, x2

    def boundary_mask(self, x1, x2):
        """Outermost-layer mask on the growth edges.

        Degenerate axes (span 1) are skipped: a one-dimensional chain is
        not "all boundary" along the axis it never uses.
        """
        mask = np.zeros(x1.shape, dtype=bool)
        if self.span1 > 1:
            mask |= x1 == self.n1_max
        if self.span2 > 1:
            mask |= x2 == self.n2_max
        return mask


@dataclass
class RateModel:
    """Transition kernel of a lattice CTMC.

    ``transitions(state)`` maps a state tuple to a finite list of
    (target-state, rate) pairs with nonnegative rates and no self-loops.
    ``moment_guess`` gives per-axis first-moment scales used to seed the
    adaptive truncation (None marks a degenerate axis), ``stable`` is the
    positive-recurrence verdict when the constructor knows it, and
    ``offset2`` is carried into the truncation box.
    """

    transitions: Callable[[tuple], list]
    tag: str
    moment_guess: Optional[tuple] = None
    stable: Optional[bool] = None
    offset2: int = 0


@dataclass
class Generator:
    """Assembled finite generator: off-diagonal CSR rates plus exit rates.

    Rows sum to zero exactly in the documented accumulation order: the
    diagonal is -math.fsum(row rates), and fsum is exactly rounded, hence
    order-independent, so summing any row's off-diagonal entries with fsum
    and adding the diagonal returns 0.0 identically.
    """

    box: TruncationBox
    offdiag: sp.csr_matrix
    exit_rates: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    bandwidth: int
    model_tag: str

    @property
    def n_states(self) -> int:
        return self.box.n_states

    def row_sums(self) -> np.ndarray:
        """Exact generator row sums (documented fsum ordering)."""
        out = np.empty(self.n_states)
        indptr = self.offdiag.indptr
        data = self.offdiag.data
        for i in range(self.n_states):
            out[i] = math.fsum(data[indptr[i]:indptr[i + 1]]) - self.exit_rates[i]
        return out


@dataclass
class TruncatedDistribution:
    """Stationary probability table on a truncation box.

    Probabilities are stored in canonical (x1-major) order aligned with
    ``x1``/``x2``.  ``boundary_mass`` is the mass on the outermost layer
    of the growth edges and is the resolution limit of any functional
    computed from the table.
    """

    box: TruncationBox
    p: np.ndarray
    boundary_mass: float
    solve_method: str
    x1: np.ndarray
    x2: np.ndarray
    adapt_history: Optional[list] = None
    iterations: Optional[int] = None

    def validate(self):
        if np.any(self.p < 0):
            raise AssertionError("negative stationary probability")
        if abs(math.fsum(self.p) - 1.0) > 1e-12:
            raise AssertionError("stationary vector not normalized")

    def prob(self, x1: int, x2: int = 0) -> float:
        if not self.box.contains(x1, x2):
            return 0.0
        return float(self.p[self.box.index_of(x1, x2)])

    def prob_empty(self) -> float:
        """Probability of the all-zero state."""
        return self.prob(0, 0)

    def mean(self, axis: int) -> float:
        coords = self.x1 if axis == 1 else self.x2
        return float(np.dot(self.p, coords))

    def var(self, axis: int) -> float:
        coords = (self.x1 if axis == 1 else self.x2).astype(float)
        m = self.mean(axis)
        return float(np.dot(self.p, (coords - m) ** 2))

    def marginal(self, axis: int):
        """(values, probabilities) of one coordinate's marginal law."""
        coords = self.x1 if axis == 1 else self.x2
        lo = int(coords.min())
        probs = np.bincount(coords - lo, weights=self.p)
        return np.arange(lo, lo + len(probs)), probs

    def total_count_marginal(self):
        """(values, probabilities) of the law of x1 + x2."""
        tot = self.x1 + self.x2
        lo = int(tot.min())
        probs = np.bincount(tot - lo, weights=self.p)
        return np.arange(lo, lo + len(probs)), probs


def functional(dist: TruncatedDistribution, f) -> float:
    """Expectation of f(x1, x2) under the table; f must accept arrays."""
    vals = np.asarray(f(dist.x1, dist.x2), dtype=float)
    return float(np.dot(dist.p, vals))


def tv_distance(a: TruncatedDistribution, b: TruncatedDistribution) -> float:
    if a.box != b.box:
        raise ValueError("distributions live on different boxes")
    return 0.5 * float(np.abs(a.p - b.p).sum())


# ---------------------------------------------------------------------------
# Generator assembly
# ---------------------------------------------------------------------------


def build_generator(model: RateModel, box: TruncationBox) -> Generator:
    """Materialize the model's generator on the box (reflecting boundary).

    Transitions leaving the box are dropped, which keeps the generator
    conservative; the dropped flow shows up as boundary mass in solves.
    """
    n = box.n_states
    rows, cols, vals = [], [], []
    exit_rates = np.zeros(n)
    x1s, x2s = box.state_arrays()
    for i in range(n):
        s = (int(x1s[i]), int(x2s[i]))
        kept = {}
        for target, rate in model.transitions(s):
            if rate < 0 or not math.isfinite(rate):
                raise ModelDefinitionError(
                    f"model {model.tag!r}: invalid rate {rate} at state {s} -> {target}")
            if rate == 0.0:
                continue
            if target == s:
                raise ModelDefinitionError(
                    f"model {model.tag!r}: self-transition at state {s}")
            if len(target) != 2:
                raise ModelDefinitionError(
                    f"model {model.tag!r}: state dimension {len(target)} not solvable on a box")
            if target in kept:
                raise ModelDefinitionError(
                    f"model {model.tag!r}: duplicate transition {s} -> {target}")
            if not box.contains(target[0], target[1]):
                continue  # reflected
            kept[target] = rate
        if kept:
            exit_rates[i] = math.fsum(kept.values())
            for (t1, t2), rate in kept.items():
                rows.append(i)
                cols.append(box.index_of(t1, t2))
                vals.append(rate)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    bandwidth = int(np.abs(rows - cols).max()) if len(rows) else 1
    offdiag = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return Generator(box=box, offdiag=offdiag, exit_rates=exit_rates,
                     x1=x1s, x2=x2s, bandwidth=max(bandwidth, 1),
                     model_tag=model.tag)


# ---------------------------------------------------------------------------
# Cancellation-free banded elimination
# ---------------------------------------------------------------------------
#
# Forward pass, for n = N-1 down to 1 (censoring state n away):
#     S_n  = sum_{j<n} Q[n, j]            (recomputed row sum, never stored)
#     Q[i, j] += Q[i, n] * Q[n, j] / S_n  for i, j < n within the band
# The incoming column {Q[j, n] : j < n} and S_n are recorded at the moment
# state n is eliminated.  Back substitution then rebuilds the unnormalized
# stationary vector from the censored-chain balance
#     pi_n * S_n = sum_{j<n} pi_j * Q[j, n],   pi_0 = 1.
# Only additions, multiplications and divisions of nonnegative numbers
# occur.  The matrix is processed through a dense sliding window of width
# about twice the bandwidth, so memory stays O(N * bandwidth).


def _elim_batch_numpy(W, k_hi, k_lo, m, cols, S, lo):
    for k in range(k_hi, k_lo, -1):
        a = k - m if k > m else 0
        g = lo + k
        row = W[k, a:k]
        s = float(row.sum())
        S[g] = s
        if s <= 0.0 or not math.isfinite(s):
            return k
        col = W[a:k, k]
        cols[g, m - (k - a):] = col
        W[a:k, a:k] += np.outer(col * (1.0 / s), row)
    return -1


def _back_substitute_numpy(cols, S, m, pi):
    n_states = pi.shape[0]
    pi[0] = 1.0
    rescales = 0
    for n in range(1, n_states):
        a = n - m if n > m else 0
        w = n - a
        c = cols[n, m - w:]
        v = float(np.dot(pi[a:n], c)) / S[n]
        pi[n] = v
        if v > 1e280:
            pi[: n + 1] *= 2.0 ** -512
            rescales += 1
            if rescales > 1:
                return -n
    return 0


if HAVE_NUMBA:

    @njit(cache=True)
    def _elim_batch_numba(W, k_hi, k_lo, m, cols, S, lo):  # pragma: no cover - jit
        for k in range(k_hi, k_lo, -1):
            a = k - m
            if a < 0:
                a = 0
            g = lo + k
            s = 0.0
            for j in range(a, k):
                s += W[k, j]
            S[g] = s
            if s <= 0.0 or not math.isfinite(s):
                return k
            inv = 1.0 / s
            for i in range(a, k):
                c = W[i, k]
                cols[g, m - (k - i)] = c
                if c != 0.0:
                    ci = c * inv
                    for j in range(a, k):
                        W[i, j] += ci * W[k, j]
        return -1

    @njit(cache=True)
    def _back_substitute_numba(cols, S, m, pi):  # pragma: no cover - jit
        n_states = pi.shape[0]
        pi[0] = 1.0
        rescales = 0
        for n in range(1, n_states):
            a = n - m
            if a < 0:
                a = 0
            w = n - a
            acc = 0.0
            for t in range(w):
                acc += pi[a + t] * cols[n, m - w + t]
            v = acc / S[n]
            pi[n] = v
            if v > 1e280:
                for t in range(n + 1):
                    pi[t] *= 2.0 ** -512
                rescales += 1
                if rescales > 1:
                    return -n
        return 0


def _gth_solve(gen: Generator) -> np.ndarray:
    """Unnormalized stationary vector by banded cancellation-free elimination."""
    n_states = gen.n_states
    if n_states == 1:
        return np.ones(1)
    m = min(gen.bandwidth, n_states - 1)
    if n_states * m * 8 > BAND_MEMORY_CAP:
        raise TruncationFailureError(
            f"column store for {n_states} states at bandwidth {m} exceeds memory cap",
            history=[])
    Q = gen.offdiag
    cols = np.zeros((n_states, m))
    S = np.zeros(n_states)
    pad = max(64, m)
    elim = _elim_batch_numba if USE_NUMBA else _elim_batch_numpy
    back = _back_substitute_numba if USE_NUMBA else _back_substitute_numpy

    n = n_states - 1
    W = None
    lo = 0
    while n >= 1:
        new_lo = max(0, n - m - pad + 1)
        size = n + 1 - new_lo
        Wnew = np.zeros((size, size))
        if W is None:
            Wnew[:, :] = Q[new_lo:n + 1, new_lo:n + 1].toarray()
        else:
            off = lo - new_lo
            live = n + 1 - lo
            Wnew[off:, off:] = W[:live, :live]
            if off:
                Wnew[:off, :] = Q[new_lo:lo, new_lo:n + 1].toarray()
                Wnew[off:, :off] = Q[lo:n + 1, new_lo:lo].toarray()
        W, lo = Wnew, new_lo
        k_hi = n - lo
        k_lo = 0 if lo == 0 else m - 1
        status = elim(W, k_hi, k_lo, m, cols, S, lo)
        if status >= 0:
            g = lo + status
            state = (int(gen.x1[g]), int(gen.x2[g]))
            raise ReducibleChainError(
                state,
                f"state {state} has no transitions to lower-indexed states; "
                f"chain is reducible on the box")
        n = lo + k_lo

    # Structural unreachability: a state whose incoming column is exactly
    # zero at elimination time receives no stationary mass from below.
    pi = np.zeros(n_states)
    status = back(cols, S, m, pi)
    if status < 0:
        raise TruncationFailureError(
            "stationary vector dynamic range exceeds float64 after rescaling",
            history=[])
    if pi.min() == 0.0:
        idx = int(np.argmin(pi))
        if not cols[idx].any():
            state = (int(gen.x1[idx]), int(gen.x2[idx]))
            raise ReducibleChainError(
                state, f"state {state} is unreachable on the box")
    return pi


def stationary_direct(gen: Generator) -> TruncatedDistribution:
    """Stationary distribution by cancellation-free direct elimination."""
    pi = _gth_solve(gen)
    total = math.fsum(pi)
    p = pi / total
    mask = gen.box.boundary_mask(gen.x1, gen.x2)
    dist = TruncatedDistribution(
        box=gen.box, p=p, boundary_mass=float(p[mask].sum()),
        solve_method="direct", x1=gen.x1, x2=gen.x2)
    dist.validate()
    return dist


# ---------------------------------------------------------------------------
# Uniformized power iteration (independent cross-check)
# ---------------------------------------------------------------------------


def stationary_power(gen: Generator, tol: float,
                     max_iters: int = 2_000_000) -> TruncatedDistribution:
    """Stationary distribution by power iteration on the uniformized chain.

    Stops when the estimated distance to the fixed point (step change
    divided by the fitted contraction gap) drops below tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = gen.n_states
    if n == 1:
        return TruncatedDistribution(gen.box, np.ones(1), 0.0, "power",
                                     gen.x1, gen.x2)
    lam = 1.02 * float(gen.exit_rates.max())
    if lam <= 0:
        raise ReducibleChainError(None, "all states are absorbing")
    P = (gen.offdiag / lam + sp.diags(1.0 - gen.exit_rates / lam)).tocsr()
    PT = P.T.tocsr()
    v = np.full(n, 1.0 / n)
    deltas = []
    it = 0
    check_every = 16
    while it < max_iters:
        for _ in range(check_every):
            v_new = PT @ v
            it += 1
            delta = 0.5 * float(np.abs(v_new - v).sum())
            v = v_new
        deltas.append(delta)
        if delta == 0.0:
            break
        if len(deltas) >= 4:
            ratio = (deltas[-1] / deltas[-4]) ** (1.0 / (3 * check_every))
            ratio = min(max(ratio, 0.0), 0.999999)
            if delta * ratio / (1.0 - ratio) < 0.5 * tol:
                break
    else:
        raise PowerIterationError(
            f"no convergence after {max_iters} iterations", residual=deltas[-1])
    v = np.maximum(v, 0.0)
    p = v / math.fsum(v)
    mask = gen.box.boundary_mask(gen.x1, gen.x2)
    dist = TruncatedDistribution(
        box=gen.box, p=p, boundary_mass=float(p[mask].sum()),
        solve_method="power", x1=gen.x1, x2=gen.x2, iterations=it)
    dist.validate()
    return dist


# ---------------------------------------------------------------------------
# Adaptive truncation
# ---------------------------------------------------------------------------


def _start_edge(guess: float) -> int:
    return int(math.ceil(guess + 8.0 * math.sqrt(guess + 1.0))) + 10


def _grow_edge(edge: int, factor: float) -> int:
    return max(int(math.ceil(edge * factor)), edge + 8)


def adapt_truncation(model: RateModel, functionals: dict, tol: float,
                     box_hint: Optional[TruncationBox] = None,
                     growth: float = 1.4, max_steps: int = 16,
                     state_cap: int = STATE_CAP):
    """Grow the box geometrically until functionals stabilize.

    Returns (box, distribution) once every requested functional changes by
    less than tol between successive boxes and the boundary mass is below
    tol.  Growth is directed: an axis is enlarged when its own outer layer
    carries mass above tol/4, otherwise both live axes grow.  The start
    box is seeded from the model's analytic first-moment guess per axis
    (mean + 8*sqrt(mean+1) + 10, a Poisson-scale spread).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if model.stable is False:
        raise StabilityError(
            f"model {model.tag!r} is not positive recurrent; no stationary law")

    history = []
    prev_vals = None

    if box_hint is not None:
        box = box_hint
        # A hint is usually an already-converged box: confirm against a
        # strictly smaller probe instead of growing, so repeated calls with
        # the returned box are stable (no ratcheting).
        p1 = box.n1_max if box.span1 == 1 else int(box.n1_max / growth)
        p2 = box.n2_max if box.span2 == 1 else int(box.n2_max / growth)
        shrank = (box.span1 == 1 or p1 < box.n1_max) and \
                 (box.span2 == 1 or p2 < box.n2_max)
        if shrank:
            try:
                probe = TruncationBox(p1, p2, box.offset2)
            except ValueError:
                probe = None
            if probe is not None:
                gen = build_generator(model, probe)
                dist = stationary_direct(gen)
                prev_vals = {name: functional(dist, f)
                             for name, f in functionals.items()}
                history.append({"box": probe, "values": prev_vals,
                                "boundary_mass": dist.boundary_mass})
    else:
        if model.moment_guess is None:
            raise ValueError(f"model {model.tag!r} carries no moment guess; "
                             "pass box_hint")
        g1, g2 = model.moment_guess
        n1 = _start_edge(g1) if g1 is not None else 0
        n2 = _start_edge(g2) if g2 is not None else 0
        box = TruncationBox(n1, n2, model.offset2)
    if box.n_states > state_cap:
        raise TruncationFailureError(
            f"start box {box} already exceeds the state cap {state_cap}",
            history=[])
    for _ in range(max_steps):
        gen = build_generator(model, box)
        dist = stationary_direct(gen)
        vals = {name: functional(dist, f) for name, f in functionals.items()}
        history.append({"box": box, "values": vals,
                        "boundary_mass": dist.boundary_mass})
        if prev_vals is not None:
            change = max(abs(vals[k] - prev_vals[k]) for k in vals) if vals else 0.0
            if change < tol and dist.boundary_mass < tol:
                dist.adapt_history = history
                return box, dist
        prev_vals = vals

        grow1 = grow2 = False
        if box.span1 > 1:
            mass1 = float(dist.p[dist.x1 == box.n1_max].sum())
            grow1 = mass1 > tol / 4
        if box.span2 > 1:
            mass2 = float(dist.p[dist.x2 == box.n2_max].sum())
            grow2 = mass2 > tol / 4
        if not (grow1 or grow2):
            grow1 = box.span1 > 1
            grow2 = box.span2 > 1
        n1 = _grow_edge(box.n1_max, growth) if grow1 else box.n1_max
        n2 = _grow_edge(box.n2_max, growth) if grow2 else box.n2_max
        new_box = TruncationBox(n1, n2, box.offset2)
        if new_box.n_states > state_cap:
            raise TruncationFailureError(
                f"state cap {state_cap} exceeded at box {new_box}; "
                f"last functional values {[h['values'] for h in history[-2:]]}",
                history=history[-2:])
        box = new_box
    raise TruncationFailureError(
        f"no convergence after {max_steps} growth steps; "
        f"last functional values {[h['values'] for h in history[-2:]]}",
        history=history[-2:])


# Standard functionals for adapt_truncation and reports.


def f_mean_x1(x1, x2):
    return x1.astype(float)


def f_mean_x2(x1, x2):
    return x2.astype(float)


def f_empty(x1, x2):
    return ((x1 == 0) & (x2 == 0)).astype(float)
