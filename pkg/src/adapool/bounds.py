"""Error envelopes on AdaPool's softmax weights versus the signal-optimal weights.

Given relation scores ``r`` and a signal mask, the signal weights satisfy
``L_s <= 1/k - w_i <= U_s`` and the noise weights ``L_eta <= -w_i <= U_eta``,
where the bounds only depend on the neighbourhood widths of the two score
clusters, their margin ``M`` and their spread ``D``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .pooling import softmax

SLACK = 1e-12


class DegeneratePartitionError(ValueError):
    """Signal or noise subset is empty."""


@dataclass(frozen=True)
class RelationStats:
    eps_s: float
    eps_eta: float
    M: float
    D: float
    k: int
    N: int


@dataclass(frozen=True)
class WeightBounds:
    L_s: float
    U_s: float
    L_eta: float
    U_eta: float


def relation_stats(r, mask) -> RelationStats:
    r = np.asarray(r, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if r.ndim != 1 or mask.shape != r.shape:
        raise ValueError(f"scores {r.shape} and mask {mask.shape} must be matching vectors")
    k, N = int(mask.sum()), r.size
    if k < 1 or k == N:
        raise DegeneratePartitionError(f"need 1 <= k <= N-1, got k={k}, N={N}")
    rs, rn = r[mask], r[~mask]
    eps_s = float(rs.max() - rs.min())
    eps_eta = float(rn.max() - rn.min())
    M = float(rs.min() - rn.max())
    D = M + eps_s + eps_eta  # == max(r_s) - min(r_eta), kept in this form so the identity is exact
    return RelationStats(eps_s, eps_eta, M, D, k, N)


def weight_bounds(stats: RelationStats) -> WeightBounds:
    k, N = stats.k, stats.N
    es, en, M, D = stats.eps_s, stats.eps_eta, stats.M, stats.D

    # c * e^z with empty terms dropped; exp overflow saturates the bound at 0 or 1/k.
    def term(c, z):
        if c == 0:
            return 0.0
        return math.inf if z > 709 else c * math.exp(z)

    L_s = 1.0 / k - 1.0 / (1.0 + term(k - 1, -es) + term(N - k, -D))
    U_s = 1.0 / k - 1.0 / (1.0 + term(k - 1, es) + term(N - k, -M))
    L_eta = -1.0 / (term(k, M) + 1.0 + term(N - k - 1, -en))
    U_eta = -1.0 / (term(k, D) + 1.0 + term(N - k - 1, en))
    return WeightBounds(L_s, U_s, L_eta, U_eta)


@dataclass
class BoundsReport:
    stats: RelationStats
    bounds: WeightBounds
    worst_slack: float
    worst_index: int
    passed: bool
    violations: list = field(default_factory=list)

    def as_row(self) -> dict:
        row = {**asdict(self.stats), **asdict(self.bounds)}
        row.update(worst_slack=self.worst_slack, worst_index=self.worst_index, passed=self.passed)
        return row


def verify_bounds(r, mask, slack: float = SLACK) -> BoundsReport:
    """Check every softmax weight against the envelopes.

    The slack of a weight is its distance inside the tighter side of its
    interval; a negative slack below ``-slack`` is a violation.
    """
    r = np.asarray(r, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    stats = relation_stats(r, mask)
    b = weight_bounds(stats)
    w = softmax(r)
    err = np.where(mask, 1.0 / stats.k - w, -w)
    lo = np.where(mask, b.L_s, b.L_eta)
    hi = np.where(mask, b.U_s, b.U_eta)
    margins = np.minimum(err - lo, hi - err)
    worst = int(np.argmin(margins))
    bad = np.flatnonzero(margins < -slack)
    violations = [(int(i), float(margins[i])) for i in bad]
    return BoundsReport(stats, b, float(margins[worst]), worst, not violations, violations)


def random_case(rng: np.random.Generator, n_max: int = 64, low: float = -5.0, high: float = 5.0):
    N = int(rng.integers(2, n_max + 1))
    k = int(rng.integers(1, N))
    mask = np.zeros(N, dtype=bool)
    mask[rng.choice(N, size=k, replace=False)] = True
    return rng.uniform(low, high, N), mask


@dataclass
class SweepResult:
    cases: int
    failures: int
    worst_slack: float
    reports: list

    @property
    def passed(self) -> bool:
        return self.failures == 0


def sweep(cases: int, seed: int, n_max: int = 64, keep: int = 0) -> SweepResult:
    """Randomised containment check over ``cases`` independent (r, mask) draws."""
    rng = np.random.default_rng(seed)
    failures, worst, kept = 0, math.inf, []
    for _ in range(cases):
        r, mask = random_case(rng, n_max)
        rep = verify_bounds(r, mask)
        failures += not rep.passed
        worst = min(worst, rep.worst_slack)
        if len(kept) < keep or not rep.passed:
            kept.append(rep)
    return SweepResult(cases, failures, worst, kept)


REPORT_FIELDS = ["eps_s", "eps_eta", "M", "D", "k", "N", "L_s", "U_s", "L_eta", "U_eta",
                 "worst_slack", "worst_index", "passed"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rep.as_row().items()})
    return buf.getvalue()
