"""Ranking metrics, rating statistics, persona credibility and persona assignment."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .errors import StatisticsError

DIMENSIONS = ("validity", "completeness", "relevance")
WILCOXON_EXACT_MAX_N = 25


# -- ranking -------------------------------------------------------------------


def _check_ranks(ranks):
    if len(ranks) == 0:
        raise StatisticsError("empty rank list")
    for r in ranks:
        if r is not None and r < 1:
            raise StatisticsError(f"rank must be >= 1, got {r}")


def hits_at_k(ranks: Sequence[int | None], k: int) -> float:
    """Fraction of queries whose answer ranks <= k. ``None`` means unreached."""
    if k < 1:
        raise StatisticsError("k must be >= 1")
    _check_ranks(ranks)
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def mrr(ranks: Sequence[int | None]) -> float:
    _check_ranks(ranks)
    return math.fsum(1.0 / r for r in ranks if r is not None) / len(ranks)


# -- correlation -------------------------------------------------------------------


def _pair(x, y, min_n=3):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError("x and y must be 1-D and of equal length")
    if len(x) < min_n:
        raise StatisticsError(f"need at least {min_n} pairs, got {len(x)}")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise StatisticsError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson_test(x, y) -> tuple[float, float]:
    """Pearson r with a two-sided p-value from the t distribution on n-2 df."""
    r = pearson(x, y)
    n = len(x)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * sps.t.sf(abs(t), n - 2))


def midranks(x) -> np.ndarray:
    """Ranks 1..n with ties sharing the average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(midranks(x), midranks(y))


def spearman_test(x, y) -> tuple[float, float]:
    x, y = _pair(x, y)
    return pearson_test(midranks(x), midranks(y))


# -- agreement -----------------------------------------------------------------------


def icc3k(matrix) -> float:
    """ICC(3,k): two-way mixed, consistency, average of k raters.

    ``matrix`` is targets x raters. Computed as (MS_rows - MS_error) / MS_rows.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise StatisticsError("ratings must be a targets x raters matrix")
    n, k = m.shape
    if n < 2:
        raise StatisticsError("need at least 2 targets")
    if k < 2:
        raise StatisticsError("need at least 2 raters")
    if not np.all(np.isfinite(m)):
        raise StatisticsError("incomplete ratings matrix")
    grand = m.mean()
    ss_rows = k * float(((m.mean(axis=1) - grand) ** 2).sum())
    ss_cols = n * float(((m.mean(axis=0) - grand) ** 2).sum())
    ss_total = float(((m - grand) ** 2).sum())
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    ms_rows = ss_rows / (n - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    if ms_rows == 0.0:
        raise StatisticsError("ICC undefined: no between-target variance")
    return (ms_rows - ms_err) / ms_rows


# -- rank tests ----------------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    n: int
    method: str


def _signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Counts of sign patterns by sum of (doubled) positive ranks."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b, exact_max_n: int = WILCOXON_EXACT_MAX_N) -> TestResult:
    """Paired two-sided signed-rank test; zero differences are dropped.

    The statistic is min(W+, W-). For n <= ``exact_max_n`` the p-value is exact
    (tie-aware enumeration over sign patterns); otherwise a normal
    approximation with tie and continuity corrections is used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticsError("paired samples must be 1-D and equal length")
    d = b - a
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise StatisticsError("all paired differences are zero")
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _signed_rank_null_counts(doubled)
        cutoff = int(round(2 * stat))
        tail = sum(counts[: cutoff + 1])
        p = min(1.0, 2.0 * float(tail) / float(2**n))
        return TestResult(stat, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
    z = (abs(stat - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return TestResult(stat, float(min(1.0, 2.0 * sps.norm.sf(z))), n, "normal")


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """Rank-based one-way test with tie correction; p from chi-square on k-1 df."""
    if len(groups) < 2:
        raise StatisticsError("need at least 2 groups")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if any(len(g) == 0 for g in arrays):
        raise StatisticsError("groups must be non-empty")
    pooled = np.concatenate(arrays)
    n = len(pooled)
    ranks = midranks(pooled)
    h = 0.0
    start = 0
    for g in arrays:
        rg = ranks[start : start + len(g)]
        h += rg.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float((tie_counts**3 - tie_counts).sum()) / (n**3 - n)
    if correction <= 0.0:
        return TestResult(0.0, 1.0, n, "chi2")
    h = max(h / correction, 0.0)
    return TestResult(h, float(sps.chi2.sf(h, len(arrays) - 1)), n, "chi2")


def binomial_two_sided(k: int, n: int, p0: float = 0.5) -> float:
    """Exact two-sided binomial p: total probability of outcomes no likelier than k."""
    if not (0 <= k <= n):
        raise StatisticsError("need 0 <= k <= n")
    if not (0.0 <= p0 <= 1.0):
        raise StatisticsError("p0 must lie in [0, 1]")
    pmf = sps.binom.pmf(np.arange(n + 1), n, p0)
    threshold = pmf[k] * (1.0 + 1e-7)
    keep = pmf <= threshold
    if keep.all():
        return 1.0
    return float(min(1.0, math.fsum(pmf[keep].tolist())))


# -- ratings -------------------------------------------------------------------------


@dataclass(frozen=True)
class RatingRecord:
    rater_id: str
    hypothesis_id: str
    system: str
    validity: float
    completeness: float
    relevance: float

    def __post_init__(self):
        for dim in DIMENSIONS:
            v = getattr(self, dim)
            if not (1 <= v <= 5):
                raise StatisticsError(f"{dim} score {v} outside [1, 5]")

    def score(self, dim: str) -> float:
        return getattr(self, dim)


def read_ratings_csv(path) -> list[RatingRecord]:
    import csv

    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"rater_id", "hypothesis_id", "system", *DIMENSIONS} - set(reader.fieldnames or ())
        if missing:
            raise StatisticsError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    RatingRecord(
                        row["rater_id"],
                        row["hypothesis_id"],
                        row["system"],
                        *(float(row[d]) for d in DIMENSIONS),
                    )
                )
            except (ValueError, StatisticsError) as exc:
                raise StatisticsError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass(frozen=True)
class CredibilityRow:
    group: str
    dimension: str
    n: int
    r: float
    p: float


def validate_persona(
    persona_ratings: Sequence,
    expert_ratings: Sequence,
    groups: Mapping[str, str] | None = None,
    dimensions: Sequence[str] = DIMENSIONS,
) -> list[CredibilityRow]:
    """Pearson r (t-test p) between persona scores and mean expert scores per item.

    Items are keyed by (hypothesis_id, system). ``groups`` maps hypothesis_id to
    a group label such as the task; without it everything is one group "all".
    Ratings may be RatingRecord rows or any object with the same attributes.
    """

    def key(rec):
        return (rec.hypothesis_id, rec.system)

    persona = defaultdict(list)
    for rec in persona_ratings:
        persona[key(rec)].append(rec)
    expert = defaultdict(list)
    for rec in expert_ratings:
        expert[key(rec)].append(rec)
    matched = sorted(set(persona) & set(expert))
    unmatched = sorted(set(persona) ^ set(expert))
    if unmatched:
        raise StatisticsError(f"unmatched explanation ids: {unmatched[:5]}{'...' if len(unmatched) > 5 else ''}")
    by_group = defaultdict(list)
    for item in matched:
        g = "all" if groups is None else groups.get(item[0])
        if g is None:
            raise StatisticsError(f"no group for hypothesis {item[0]!r}")
        by_group[g].append(item)
    rows = []
    for g in sorted(by_group):
        items = by_group[g]
        if len(items) < 3:
            raise StatisticsError(f"group {g!r}: need >= 3 matched items, got {len(items)}")
        for dim in dimensions:
            xs = [float(np.mean([r.score(dim) for r in persona[i]])) for i in items]
            ys = [float(np.mean([r.score(dim) for r in expert[i]])) for i in items]
            r, p = pearson_test(xs, ys)
            rows.append(CredibilityRow(g, dim, len(items), r, p))
    return rows


def assign_persona(answers: Sequence[str]) -> str:
    """Majority persona over exactly three single-choice answers."""
    if len(answers) != 3:
        raise StatisticsError(f"expected 3 answers, got {len(answers)}")
    counts = Counter(answers)
    if len(counts) > 2:
        raise StatisticsError(f"answers reference {len(counts)} personas; expected at most 2")
    persona, _ = counts.most_common(1)[0]
    return persona
