"""Statistical tests used to compare result tables.

All p-values are two-sided where a direction exists. Each TestResult's
``method`` string names the conventions used (zero handling, tie handling,
continuity correction) so a reported figure can be audited.
"""

import itertools
import math
from typing import List, Literal, Mapping, Sequence, Tuple, Union

import numpy as np
from errors import ValidationError
from models import TestResult
from scipy import stats as st
from scipy.stats import rankdata

EXACT_MAX_PAIRS = 25
MIN_PAIRS = {"exact": 5, "normal_approx": 6}
TIE_DECIMALS = 12
# Stands in for an unbounded statistic when the error variance is zero
DEGENERATE_STATISTIC = float(np.finfo(np.float64).max)

Groups = Union[Sequence[Sequence[float]], Mapping[str, Sequence[float]]]


def _named_groups(groups: Groups) -> Tuple[List[str], List[np.ndarray]]:
    if isinstance(groups, Mapping):
        names = [str(name) for name in groups]
        values = [np.asarray(v, dtype=float) for v in groups.values()]
    else:
        values = [np.asarray(v, dtype=float) for v in groups]
        names = [f"group{i}" for i in range(len(values))]
    if len(values) < 2:
        raise ValidationError("Need at least 2 groups")
    for name, v in zip(names, values):
        if v.ndim != 1 or v.size < 2:
            raise ValidationError(f"Group {name} needs at least 2 values")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"Group {name} contains non-finite values")
    return names, values


def _f_result(
    between: float, within: float, df1: int, df2: int, method: str
) -> TestResult:
    """F = (between/df1) / (within/df2) with the upper-tail p-value"""
    between = max(between, 0.0)
    if within <= 0.0:
        if between == 0.0:
            return TestResult(statistic=0.0, df=(df1, df2), p_value=1.0, method=method)
        return TestResult(
            statistic=DEGENERATE_STATISTIC,
            df=(df1, df2),
            p_value=0.0,
            method=method,
            flags=["zero_within_variance"],
        )
    f_stat = (between / df1) / (within / df2)
    # scipy's F survival function evaluates the regularized incomplete beta
    p_value = float(st.f.sf(f_stat, df1, df2))
    return TestResult(
        statistic=f_stat,
        df=(df1, df2),
        p_value=min(max(p_value, 0.0), 1.0),
        method=method,
    )


def one_way_anova(groups: Groups) -> TestResult:
    """Between-group vs within-group variance of independent samples"""
    _, values = _named_groups(groups)
    everything = np.concatenate(values)
    grand = everything.mean()
    between = float(sum(v.size * (v.mean() - grand) ** 2 for v in values))
    within = float(sum(((v - v.mean()) ** 2).sum() for v in values))
    k, n = len(values), everything.size
    return _f_result(between, within, k - 1, n - k, "one-way ANOVA, F upper tail")


def tukey_hsd(groups: Groups) -> List[TestResult]:
    """All pairwise mean comparisons against the studentized range"""
    names, values = _named_groups(groups)
    sizes = {v.size for v in values}
    if len(sizes) != 1:
        raise ValidationError("Tukey HSD here requires equal group sizes")
    n = sizes.pop()
    k = len(values)
    df = k * n - k
    within = float(sum(((v - v.mean()) ** 2).sum() for v in values))
    standard_error = math.sqrt(within / df / n)

    results = []
    for i, j in itertools.combinations(range(k), 2):
        gap = abs(values[i].mean() - values[j].mean())
        flags: List[str] = []
        if standard_error == 0.0:
            q = 0.0 if gap == 0.0 else DEGENERATE_STATISTIC
            p_value = 1.0 if gap == 0.0 else 0.0
            if gap > 0.0:
                flags.append("zero_within_variance")
        else:
            q = gap / standard_error
            p_value = float(st.studentized_range.sf(q, k, df)) if q > 0.0 else 1.0
        results.append(
            TestResult(
                statistic=q,
                df=(k, df),
                p_value=min(max(p_value, 0.0), 1.0),
                method="Tukey HSD, studentized range upper tail",
                label=f"{names[i]} vs {names[j]}",
                flags=flags,
            )
        )
    return results


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each doubled rank sum over all 2^n sign assignments"""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(
    pairs: Sequence[Tuple[float, float]],
    mode: Literal["exact", "normal_approx"] = "normal_approx",
) -> TestResult:
    """Paired signed-rank test on d = a - b.

    Zero differences are dropped and counted; tied |d| share average ranks;
    differences are rounded to 12 decimals before tie detection. The exact
    mode enumerates the sign-flip null distribution (n <= 25). The normal
    approximation uses the tie-corrected variance and a 0.5 continuity
    correction.
    """
    if mode not in MIN_PAIRS:
        raise ValidationError(f"Unknown Wilcoxon mode {mode!r}")
    data = np.asarray(pairs, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValidationError("Wilcoxon needs a list of (a, b) pairs")
    differences = np.round(data[:, 0] - data[:, 1], TIE_DECIMALS)
    nonzero = differences[differences != 0]
    zeros = int(differences.size - nonzero.size)
    n = int(nonzero.size)
    if n < MIN_PAIRS[mode]:
        raise ValidationError(
            f"Wilcoxon ({mode}) needs >= {MIN_PAIRS[mode]} nonzero differences, got {n}"
        )

    ranks = rankdata(np.abs(nonzero), method="average")
    w_plus = float(ranks[nonzero > 0].sum())
    w_minus = float(ranks[nonzero < 0].sum())
    statistic = min(w_plus, w_minus)
    flags = [f"zeros_dropped={zeros}"]
    if np.unique(np.abs(nonzero)).size < n:
        flags.append("ties_average_ranks")

    if mode == "exact":
        if n > EXACT_MAX_PAIRS:
            raise ValidationError(
                f"Exact Wilcoxon supports n <= {EXACT_MAX_PAIRS}, got {n}"
            )
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_null(doubled)
        observed = int(round(2 * statistic))
        tail = counts[: observed + 1].sum() / float(2**n)
        p_value = min(1.0, 2.0 * tail)
        method = (
            "Wilcoxon signed-rank, exact sign-flip enumeration, "
            "zeros dropped, average ranks"
        )
    else:
        result = st.wilcoxon(
            nonzero,
            zero_method="wilcox",
            correction=True,
            alternative="two-sided",
            method="approx",
        )
        p_value = float(result.pvalue)
        method = (
            "Wilcoxon signed-rank, normal approximation with tie-corrected variance "
            "and 0.5 continuity correction, zeros dropped"
        )

    return TestResult(
        statistic=statistic,
        df=(float(n),),
        p_value=min(max(p_value, 0.0), 1.0),
        method=method,
        flags=flags,
    )


def rm_anova(table: Union[Sequence[Sequence[float]], np.ndarray]) -> TestResult:
    """One-way repeated-measures ANOVA on a conditions x subjects matrix"""
    try:
        data = np.asarray(table, dtype=float)
    except ValueError as e:
        raise ValidationError(f"Repeated-measures table is ragged: {e}") from e
    if data.ndim != 2:
        raise ValidationError("Repeated-measures table must be a 2D matrix")
    if np.isnan(data).any():
        raise ValidationError("Repeated-measures table is incomplete")
    k, n = data.shape
    if k < 2 or n < 2:
        raise ValidationError("Need at least 2 conditions and 2 subjects")

    grand = data.mean()
    conditions = data.mean(axis=1, keepdims=True)
    subjects = data.mean(axis=0, keepdims=True)
    between = float(n * ((conditions - grand) ** 2).sum())
    residual = float(((data - conditions - subjects + grand) ** 2).sum())
    return _f_result(
        between,
        residual,
        k - 1,
        (k - 1) * (n - 1),
        "repeated-measures ANOVA, condition x subject residual error, F upper tail",
    )

