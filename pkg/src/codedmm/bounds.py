"""Probability bounds for the local product code, plus the oracles that check them.

Formulas are evaluated in closed form; :func:`enumerate_undecodable` and
:func:`monte_carlo_decode_stats` run the actual peeling decoder and are the
ground truth the formulas are compared against.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats

from .code import peel_stats, plan_peel
from .errors import InvalidArgument, TooLarge

ENUMERATION_LIMIT = 10**8


def _check_prob(p, name="p", open_low=True):
    lo_ok = p > 0 if open_low else p >= 0
    if not (lo_ok and p < 1) or math.isnan(p):
        raise InvalidArgument(f"{name} must lie in {'(0' if open_low else '[0'}, 1), got {p}")


def theorem1_bound(n, p, L, x):
    """Closed form ``(x / npL)^(-x/L) * exp(-x/L + np)`` for ``Pr(R >= x)``.

    Returns 1 when ``x <= npL`` (the optimizing Chernoff parameter would be
    non-positive there).  Beware: the exponent sign here does not come out
    of the Chernoff argument, and the value is far below the true tail of R
    for moderate ``x``.  :func:`chernoff_read_bound` is the valid bound.
    """
    mean = _read_bound_args(n, p, L, x)
    if x <= mean:
        return 1.0
    log_b = -(x / L) * math.log(x / mean) - x / L + n * p
    return min(1.0, math.exp(log_b))


def chernoff_read_bound(n, p, L, x):
    """Chernoff bound ``(x / npL)^(-x/L) * exp(x/L - np)`` on ``Pr(R >= x)``.

    Follows from ``R <= S L`` with ``S ~ Binomial(n, p)`` and
    ``1 + y <= e^y``, optimized at ``t = ln(x / npL) / L``.
    """
    mean = _read_bound_args(n, p, L, x)
    if x <= mean:
        return 1.0
    log_b = -(x / L) * math.log(x / mean) + x / L - n * p
    return min(1.0, math.exp(log_b))


def _read_bound_args(n, p, L, x):
    _check_prob(p)
    if n < 1 or L < 1:
        raise InvalidArgument(f"need n >= 1 and L >= 1, got n={n}, L={L}")
    if not x > 0:
        raise InvalidArgument(f"x must be positive, got {x}")
    return n * p * L


def corollary_bound(n, p, eps):
    """``(1 + eps/np)^(-np-eps) * exp(-eps)``, i.e. :func:`theorem1_bound` at ``x = (np + eps) L``.

    At ``eps = np`` this is ``(4e)^(-np)``.
    """
    _check_prob(p)
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    mu = n * p
    return math.exp(-(mu + eps) * math.log1p(eps / mu) - eps)


def chernoff_corollary_bound(n, p, eps):
    """Valid counterpart of :func:`corollary_bound`; ``(e/4)^np`` at ``eps = np``."""
    _check_prob(p)
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    mu = n * p
    return min(1.0, math.exp(-(mu + eps) * math.log1p(eps / mu) + eps))


@dataclass(frozen=True)
class AlphaCounts:
    la: int
    lb: int
    n: int
    alpha4: int
    alpha5: int
    alpha6_ub: int
    alpha7_ub: int

    def as_list(self):
        return [self.alpha4, self.alpha5, self.alpha6_ub, self.alpha7_ub]


def alpha_counts(la, lb) -> AlphaCounts:
    """Counts (exact for 4 and 5, upper bounds for 6 and 7) of S-undecodable sets."""
    if la < 1 or lb < 1:
        raise InvalidArgument(f"L_A and L_B must be >= 1, got ({la}, {lb})")
    comb = math.comb
    n = (la + 1) * (lb + 1)
    a4 = comb(la + 1, 2) * comb(lb + 1, 2)
    three_by_three = comb(la + 1, 3) * comb(lb + 1, 3)
    return AlphaCounts(
        la, lb, n,
        alpha4=a4,
        alpha5=a4 * (n - 4),
        alpha6_ub=three_by_three * comb(9, 6) + a4 * comb(n - 4, 2),
        alpha7_ub=three_by_three * comb(9, 7) + a4 * comb(n - 4, 3),
    )


def theorem2_bound(la, lb, p):
    """Upper bound on the chance that a decoding worker cannot decode its subgrid.

    ``sum_{s=4..7} alpha_s p^s (1-p)^(n-s) + Pr(Binomial(n, p) >= 8)``.
    """
    _check_prob(p, open_low=False)
    alphas = alpha_counts(la, lb)
    n = alphas.n
    if n < 8:
        raise InvalidArgument(f"the bound needs n >= 8 blocks per subgrid, got n={n}")
    if p == 0:
        return 0.0
    total = 0.0
    for s, a in zip(range(4, 8), alphas.as_list()):
        total += math.exp(math.log(a) + s * math.log(p) + (n - s) * math.log1p(-p))
    total += float(stats.binom.sf(7, n, p))
    return min(1.0, total)


def enumerate_undecodable(la, lb, s) -> int:
    """Exact number of ``s``-subsets of the subgrid that peeling cannot fully decode."""
    if la < 1 or lb < 1:
        raise InvalidArgument(f"L_A and L_B must be >= 1, got ({la}, {lb})")
    n = (la + 1) * (lb + 1)
    if not 0 <= s <= n:
        raise InvalidArgument(f"S must lie in 0..{n}, got {s}")
    if math.comb(n, s) > ENUMERATION_LIMIT:
        raise TooLarge(f"C({n}, {s}) = {math.comb(n, s)} subsets exceeds {ENUMERATION_LIMIT}")
    cells = [(r, c) for r in range(la + 1) for c in range(lb + 1)]
    count = 0
    for subset in itertools.combinations(cells, s):
        if not plan_peel(subset, la, lb).complete:
            count += 1
    return count


def locality_lower_bound(k, n) -> Fraction:
    """Smallest locality any code with ``k`` data blocks out of ``n`` can have, ``k / (n - k)``."""
    if not n > k >= 1:
        raise InvalidArgument(f"need n > k >= 1, got k={k}, n={n}")
    return Fraction(k, n - k)


def locality_comparison(la, lb) -> dict:
    k, n = la * lb, (la + 1) * (lb + 1)
    bound = locality_lower_bound(k, n)
    return {
        "k": k,
        "n": n,
        "lower_bound": float(bound),
        "lower_bound_exact": f"{bound.numerator}/{bound.denominator}",
        "achieved": min(la, lb),
        "redundancy": redundancy_over_total(la, lb),
    }


def union_bound_workers(per_worker_prob, k_workers):
    if not 0 <= per_worker_prob <= 1:
        raise InvalidArgument(f"probability out of range: {per_worker_prob}")
    if k_workers < 0:
        raise InvalidArgument(f"worker count must be >= 0, got {k_workers}")
    return min(1.0, k_workers * per_worker_prob)


def redundancy_over_total(la, lb):
    """Parity blocks as a fraction of all output blocks."""
    return 1.0 - (la * lb) / ((la + 1) * (lb + 1))


def redundancy_over_systematic(la, lb):
    """Parity blocks as a fraction of systematic output blocks."""
    return ((la + 1) * (lb + 1) - la * lb) / (la * lb)


@dataclass
class DecodeStats:
    la: int
    lb: int
    p: float
    trials: int
    undecodable: int
    r_hist: dict  # blocks read -> number of trials

    @property
    def p_undecodable(self):
        return self.undecodable / self.trials

    @property
    def mean_r(self):
        return sum(r * c for r, c in self.r_hist.items()) / self.trials

    def prob_r_at_least(self, x):
        return sum(c for r, c in self.r_hist.items() if r >= x) / self.trials

    def ccdf(self, xs):
        return {x: self.prob_r_at_least(x) for x in xs}


def monte_carlo_decode_stats(la, lb, p, trials, seed, chunk=20000) -> DecodeStats:
    """Draw independent straggle flags per cell and run the peeling decoder on each draw."""
    if trials < 1:
        raise InvalidArgument(f"trials must be >= 1, got {trials}")
    if not 0 <= p < 1:
        raise InvalidArgument(f"p must lie in [0, 1), got {p}")
    n = (la + 1) * (lb + 1)
    cells = [(r, c) for r in range(la + 1) for c in range(lb + 1)]
    rng = np.random.default_rng(seed)
    hist = Counter()
    undecodable = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        flags = rng.random((m, n)) < p
        packed = np.packbits(flags, axis=1)
        uniq, counts = np.unique(packed, axis=0, return_counts=True)
        for row, cnt in zip(uniq, counts):
            idx = np.flatnonzero(np.unpackbits(row)[:n])
            missing = frozenset(cells[i] for i in idx)
            reads, ok = peel_stats(missing, la, lb)
            hist[reads] += int(cnt)
            if not ok:
                undecodable += int(cnt)
        done += m
    return DecodeStats(la, lb, p, trials, undecodable, dict(sorted(hist.items())))


def sweep_undecodability(p, l_values) -> list[dict]:
    """One row per ``L = L_A = L_B``: subgrid size, undecodability bound, redundancy."""
    rows = []
    l_values = list(l_values)
    if not l_values:
        raise InvalidArgument("empty L range")
    for L in l_values:
        n = (L + 1) ** 2
        rows.append({
            "L": L,
            "n": n,
            "undecodable_bound": theorem2_bound(L, L, p) if n >= 8 else None,
            "redundancy_over_total": redundancy_over_total(L, L),
            "redundancy_over_systematic": redundancy_over_systematic(L, L),
        })
    return rows
