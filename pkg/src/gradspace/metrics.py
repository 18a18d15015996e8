"""Correlation and error metrics for quality-estimator evaluation.

Rank correlations are computed from integer statistics (ranks are doubled so
that tied averages stay integral), which makes them exactly reproducible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares

from gradspace.errors import DomainError, ShapeError, UndefinedCorrelationError
from gradspace.tensor import make_rng


def _pair(a, b, min_len: int = 2):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vectors differ in length: {a.size} vs {b.size}")
    if a.size < min_len:
        raise DomainError(f"need at least {min_len} values, got {a.size}")
    return a, b


def doubled_ranks(a) -> np.ndarray:
    """Twice the 1-based average ranks; ties share the mean of their positions."""
    a = np.asarray(a, dtype=float).ravel()
    order = np.argsort(a, kind="stable")
    sorted_a = a[order]
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], a.size] - 1
    # positions are 1-based: group spanning [s, e] has doubled average s + e + 2
    group_value = starts + ends + 2
    sizes = ends - starts + 1
    out = np.empty(a.size, dtype=np.int64)
    out[order] = np.repeat(group_value, sizes)
    return out


def _centered_sums(r, s):
    n = len(r)
    sr, ss = int(r.sum()), int(s.sum())
    sxy = n * int(np.dot(r, s)) - sr * ss
    sxx = n * int(np.dot(r, r)) - sr * sr
    syy = n * int(np.dot(s, s)) - ss * ss
    return sxy, sxx, syy


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a, b = _pair(a, b)
    sxy, sxx, syy = _centered_sums(doubled_ranks(a), doubled_ranks(b))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("spearman correlation undefined for constant input")
    return sxy / math.sqrt(sxx * syy)


def _tie_pairs(a) -> int:
    _, counts = np.unique(a, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall(a, b) -> float:
    """Kendall tau-b."""
    a, b = _pair(a, b)
    n = a.size
    s = 0
    chunk = max(1, 2_000_000 // n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        sa = np.sign(a[lo:hi, None] - a[None, :]).astype(np.int64)
        sb = np.sign(b[lo:hi, None] - b[None, :]).astype(np.int64)
        s += int(np.sum(sa * sb))
    s //= 2  # every unordered pair was counted twice
    n0 = n * (n - 1) // 2
    n1, n2 = _tie_pairs(a), _tie_pairs(b)
    if n0 == n1 or n0 == n2:
        raise UndefinedCorrelationError("kendall correlation undefined for constant input")
    return s / math.sqrt((n0 - n1) * (n0 - n2))


def pearson(a, b) -> float:
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if den == 0:
        raise UndefinedCorrelationError("pearson correlation undefined for constant input")
    return float(np.clip(np.dot(da, db) / den, -1.0, 1.0))


def rmse(pred, target) -> float:
    pred, target = _pair(pred, target, 1)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def outlier_ratio(pred, target, subjective_std=None) -> float:
    """Fraction of items with ``|pred - target| > 2 * std``.

    ``subjective_std`` may be per-item or scalar; when omitted the standard
    deviation of ``target`` is used for every item.
    """
    pred, target = _pair(pred, target, 1)
    if subjective_std is None:
        std = np.full_like(target, target.std())
    else:
        std = np.broadcast_to(np.asarray(subjective_std, dtype=float), target.shape)
    return float(np.mean(np.abs(pred - target) > 2 * std))


# ---------------------------------------------------------------------------
# monotonic mapping


@dataclass(frozen=True)
class LogisticFit:
    """``q -> a + (b - a) / (1 + exp(-(q - c) / d))``, or an affine fallback.

    For the affine fallback ``a`` is the slope and ``b`` the intercept.
    """

    a: float
    b: float
    c: float
    d: float
    kind: str = "logistic"
    residual: float = 0.0
    fallback: bool = False

    def __call__(self, q):
        q = np.asarray(q, dtype=float)
        if self.kind == "affine":
            return self.a * q + self.b
        return self.a + (self.b - self.a) / (1.0 + np.exp(-(q - self.c) / self.d))


def _logistic(p, q):
    a, b, c, d = p
    return a + (b - a) / (1.0 + np.exp(np.clip(-(q - c) / d, -500, 500)))


def logistic_fit(objective, subjective, seed: int = 0, restarts: int = 8) -> LogisticFit:
    """Least-squares 4-parameter logistic fit with seeded restarts.

    The returned fit never has a larger residual sum of squares than the best
    affine fit; when no logistic start beats it, the affine fit is returned
    with ``fallback=True``.
    """
    q, y = _pair(objective, subjective, 5)
    if np.ptp(q) == 0:
        raise DomainError("logistic fit needs a non-constant objective score")
    slope, intercept = np.polyfit(q, y, 1)
    affine_res = float(np.sum((slope * q + intercept - y) ** 2))

    rng = make_rng(seed)
    q_scale = float(np.std(q))
    base = np.array([y.min(), y.max(), float(np.median(q)), q_scale])
    if slope < 0:
        base[:2] = base[1::-1]
    best, best_res = None, np.inf
    for k in range(restarts):
        p0 = base.copy()
        if k:
            p0[2] = rng.uniform(q.min(), q.max())
            p0[3] = q_scale * rng.uniform(0.1, 3.0)
            p0[:2] += rng.normal(0, 0.1 * (np.ptp(y) + 1e-12), 2)
        try:
            sol = least_squares(lambda p: _logistic(p, q) - y, p0, method="lm", max_nfev=4000)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(sol.x)) or sol.x[3] == 0:
            continue
        res = float(np.sum(sol.fun ** 2))
        if res < best_res:
            best, best_res = sol.x, res

    if best is None or best_res > affine_res:
        warnings.warn("logistic fit did not beat the affine fit; using affine mapping")
        return LogisticFit(float(slope), float(intercept), 0.0, 1.0, "affine", affine_res, True)
    a, b, c, d = (float(v) for v in best)
    if d < 0:  # canonical form: positive scale
        a, b, d = b, a, -d
    return LogisticFit(a, b, c, d, "logistic", best_res)


@dataclass(frozen=True)
class EvalMetrics:
    plcc: float
    srcc: float
    krcc: float
    rmse: float
    outlier_ratio: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["or"] = d.pop("outlier_ratio")
        return d


def evaluate_scores(raw, subjective, subjective_std=None, seed: int = 0):
    """All five metrics; PLCC, RMSE and OR use the logistic-mapped scores.

    Returns ``(EvalMetrics, LogisticFit, mapped_scores)``.
    """
    raw, subjective = _pair(raw, subjective, 5)
    fit = logistic_fit(raw, subjective, seed=seed)
    mapped = fit(raw)
    m = EvalMetrics(
        plcc=pearson(mapped, subjective),
        srcc=spearman(raw, subjective),
        krcc=kendall(raw, subjective),
        rmse=rmse(mapped, subjective),
        outlier_ratio=outlier_ratio(mapped, subjective, subjective_std),
    )
    return m, fit, mapped
