"""Agreement and hypothesis-testing statistics.

Covers Bland-Altman bias with 1.96-sigma limits of agreement, the paired
two-sided Student t-test, TOST equivalence at a margin, 5x5 grade confusion
matrices with linearly weighted Cohen's kappa, and median/IQR descriptives.
Student-t tail probabilities are computed from a local regularized incomplete
beta (continued fraction), so no external statistics package is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

N_GRADES = 5


@dataclass
class BlandAltmanResult:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    n: int


@dataclass
class GradeRecord:
    case_id: str
    observer_id: str
    grade: int

    def __post_init__(self):
        self.grade = int(self.grade)
        if not 1 <= self.grade <= N_GRADES:
            raise ConfigError(f"grade must be in 1..{N_GRADES}, got {self.grade}")


@dataclass
class AgreementReport:
    confusion: np.ndarray
    weighted_kappa: float
    raw_agreement: float
    joint_leq3_count: int
    mean_grade_per_observer: dict


# ---------------------------------------------------------------------------
# Regularized incomplete beta and Student-t tails
# ---------------------------------------------------------------------------


def _betacf(a, b, x, max_iter=300, eps=1e-15):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_regularized(a, b, x):
    """I_x(a, b), accurate to well below 1e-10 for moderate a, b."""
    if a <= 0 or b <= 0:
        raise ConfigError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # Use the symmetry that keeps the continued fraction in its fast region.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, df):
    """P(T_df >= t), one-sided survival function."""
    if df <= 0:
        raise ConfigError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    half_tail = 0.5 * betainc_regularized(df / 2.0, 0.5, x)
    return half_tail if t >= 0 else 1.0 - half_tail


def student_t_two_sided_p(t, df):
    """P(|T_df| >= |t|), via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


# ---------------------------------------------------------------------------
# Paired comparisons
# ---------------------------------------------------------------------------


def _paired_diffs(pairs):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError("pairs must be a sequence of (a, b) tuples")
    if arr.shape[0] < 2:
        raise ConfigError("at least two pairs are required")
    return arr[:, 0] - arr[:, 1]


def bland_altman(pairs):
    """Bias and 1.96-sigma limits of agreement of paired differences a - b."""
    d = _paired_diffs(pairs)
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltmanResult(
        bias=bias,
        sd_diff=sd,
        loa_low=bias - 1.96 * sd,
        loa_high=bias + 1.96 * sd,
        n=len(d),
    )


def paired_t_test(pairs):
    """Two-sided paired Student t-test on differences a - b.

    All-zero differences give t = 0, p = 1 by convention; zero-variance
    nonzero differences give an infinite t and p = 0.
    """
    d = _paired_diffs(pairs)
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return {"t": 0.0, "p": 1.0}
        return {"t": math.copysign(math.inf, mean), "p": 0.0}
    t = mean / (sd / math.sqrt(n))
    return {"t": t, "p": student_t_two_sided_p(t, n - 1)}


def tost_equivalence(pairs, margin, alpha=0.05):
    """Two one-sided paired t-tests against +/- margin.

    Equivalent iff both one-sided hypotheses (mean <= -margin, mean >= +margin)
    are rejected at ``alpha``.
    """
    if margin <= 0:
        raise ConfigError("equivalence margin must be positive")
    d = _paired_diffs(pairs)
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        p_lower = 0.0 if mean > -margin else 1.0
        p_upper = 0.0 if mean < margin else 1.0
    else:
        se = sd / math.sqrt(n)
        p_lower = student_t_sf((mean + margin) / se, df)
        p_upper = 1.0 - student_t_sf((mean - margin) / se, df)
    return {
        "equivalent": bool(p_lower < alpha and p_upper < alpha),
        "p_lower": p_lower,
        "p_upper": p_upper,
    }


# ---------------------------------------------------------------------------
# Grading agreement
# ---------------------------------------------------------------------------


def confusion_matrix(records):
    """5x5 grade counts for exactly two observers; rows are the observer whose
    id sorts first, columns the other."""
    observers = sorted({r.observer_id for r in records})
    if len(observers) != 2:
        raise DataError(f"expected records from exactly 2 observers, got {observers}")
    by_case = {}
    for r in records:
        slot = by_case.setdefault(r.case_id, {})
        if r.observer_id in slot:
            raise DataError(f"case {r.case_id} graded twice by {r.observer_id}")
        slot[r.observer_id] = r.grade
    matrix = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    for case_id, slot in by_case.items():
        if len(slot) != 2:
            raise DataError(f"case {case_id} lacks a grade from one observer")
        matrix[slot[observers[0]] - 1, slot[observers[1]] - 1] += 1
    return matrix


def weighted_kappa(confusion):
    """Linearly weighted Cohen's kappa: w_ij = 1 - |i-j| / (K-1)."""
    m = np.asarray(confusion, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError("confusion matrix must be square")
    total = m.sum()
    if total <= 0:
        raise ConfigError("confusion matrix is empty")
    k = m.shape[0]
    idx = np.arange(k)
    weights = 1.0 - np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    p_obs = float((weights * m).sum() / total)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    p_exp = float((weights * np.outer(rows, cols)).sum() / total**2)
    return (p_obs - p_exp) / (1.0 - p_exp)


def agreement_summary(confusion):
    m = np.asarray(confusion, dtype=np.int64)
    total = int(m.sum())
    if total <= 0:
        raise ConfigError("confusion matrix is empty")
    grades = np.arange(1, m.shape[0] + 1)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    return AgreementReport(
        confusion=m,
        weighted_kappa=weighted_kappa(m),
        raw_agreement=float(np.trace(m) / total),
        joint_leq3_count=int(m[:3, :3].sum()),
        mean_grade_per_observer={
            "observer_1": float((grades * rows).sum() / total),
            "observer_2": float((grades * cols).sum() / total),
        },
    )


# ---------------------------------------------------------------------------
# Descriptives
# ---------------------------------------------------------------------------


def describe(samples):
    """Median and quartiles by linear interpolation of order statistics at
    positions (n-1) * q, plus mean and sample sd (0 for a single sample)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("describe requires at least one sample")
    q25, q50, q75 = np.quantile(x, [0.25, 0.5, 0.75])
    return {
        "median": float(q50),
        "iqr_low": float(q25),
        "iqr_high": float(q75),
        "mean": float(x.mean()),
        "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
    }
