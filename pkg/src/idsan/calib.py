"""Operating points and verification metrics on raw score arrays.

Conventions: a pair is accepted when ``score >= tau``. FAR is the accepted
fraction of impostor scores and TAR the accepted fraction of mated scores.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy import stats

from .errors import CalibrationLeak, EmptyImpostors, EmptyInput

FAR_TARGET_MIN_IMPOSTORS = 10_000
DEFAULT_PAUC_CAP = 1e-3
ARCFACE_TAU = 0.1051
ADAFACE_TAU = 0.1111


class PrecisionWarning(UserWarning):
    """Too few impostors to resolve the requested FAR range."""


@dataclass(frozen=True)
class OperatingPoint:
    tau: float
    target_far: float | None
    achieved_far: float
    false_accepts: int
    impostor_count: int
    mode: str  # "far-target" | "partial-auc-fallback" | "min-eer"
    split: str = "val"

    @property
    def min_far(self) -> float:
        return 1.0 / self.impostor_count

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "target_far": self.target_far,
            "achieved_far": self.achieved_far,
            "false_accepts": self.false_accepts,
            "impostor_count": self.impostor_count,
            "min_far": self.min_far,
            "mode": self.mode,
            "split": self.split,
        }


@dataclass(frozen=True)
class TarAtFar:
    tar: float
    far: float
    true_accepts: int
    mated_count: int
    false_accepts: int
    impostor_count: int
    tau: float

    @property
    def min_far(self) -> float:
        return 1.0 / self.impostor_count if self.impostor_count else math.inf

    def to_dict(self) -> dict:
        return {
            "tar": self.tar,
            "far": self.far,
            "true_accepts": self.true_accepts,
            "mated_count": self.mated_count,
            "false_accepts": self.false_accepts,
            "impostor_count": self.impostor_count,
            "min_far": self.min_far,
            "tau": self.tau,
        }


@dataclass(frozen=True)
class MetricResult:
    tar: float
    ci_low: float | None
    ci_high: float | None
    seeds: int
    per_seed_tar: list[float] = field(default_factory=list)
    ci_method: str = "t"

    @property
    def ci_defined(self) -> bool:
        return self.ci_low is not None

    def to_dict(self) -> dict:
        return {
            "tar": self.tar,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "ci_method": self.ci_method,
            "seeds": self.seeds,
            "per_seed_tar": list(self.per_seed_tar),
        }


def _scores(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def accept_count(scores: np.ndarray, tau: float) -> int:
    return int(np.count_nonzero(scores >= tau))


def calibrate_threshold(
    val_mated,
    val_impostor,
    target_far: float,
    *,
    min_impostors: int = FAR_TARGET_MIN_IMPOSTORS,
) -> OperatingPoint:
    """Pick tau on validation scores.

    With enough impostors, tau is the smallest impostor score whose
    acceptance rate stays within ``target_far``. Otherwise tau accepts only
    the top impostor score(s), i.e. the smallest measurable nonzero FAR.
    """
    imp = np.sort(_scores(val_impostor))[::-1]
    n = len(imp)
    if n == 0:
        raise EmptyImpostors("no impostor scores to calibrate on")
    if n >= min_impostors:
        mode = "far-target"
        # accepted count at tau = v is the number of scores >= v; for the
        # value at sorted position j that is the index of its last tie + 1
        values, first = np.unique(-imp, return_index=True)
        values = -values
        last_plus_one = np.append(first[1:], n)
        ok = last_plus_one / n <= target_far
        if ok.any():
            j = np.flatnonzero(ok)[-1]
            tau = float(values[j])
        else:
            tau = float(np.nextafter(imp[0], np.inf))
    else:
        mode = "partial-auc-fallback"
        tau = float(imp[0])
    fa = accept_count(imp, tau)
    return OperatingPoint(
        tau=tau,
        target_far=float(target_far),
        achieved_far=fa / n,
        false_accepts=fa,
        impostor_count=n,
        mode=mode,
    )


def tar_at_far(test_mated, test_impostor, op: OperatingPoint) -> TarAtFar:
    if op.split != "val":
        raise CalibrationLeak(f"operating point was calibrated on {op.split!r}, not validation")
    mated = _scores(test_mated)
    imp = _scores(test_impostor)
    if len(mated) == 0 and len(imp) == 0:
        raise EmptyInput("no scores to evaluate")
    ta = accept_count(mated, op.tau)
    fa = accept_count(imp, op.tau)
    return TarAtFar(
        tar=ta / len(mated) if len(mated) else math.nan,
        far=fa / len(imp) if len(imp) else math.nan,
        true_accepts=ta,
        mated_count=len(mated),
        false_accepts=fa,
        impostor_count=len(imp),
        tau=op.tau,
    )


def roc_steps(mated, impostor) -> tuple[np.ndarray, np.ndarray]:
    """Best TAR when at most j impostors may be accepted, j = 0..N.

    Returns (tar_j, far_j) where far_j = j / N.
    """
    mated = np.sort(_scores(mated))
    imp = _scores(impostor)
    n = len(imp)
    values, counts = np.unique(imp, return_counts=True)
    # impostors scoring >= values[t]; non-increasing in t
    tail = np.cumsum(counts[::-1])[::-1]
    j = np.arange(n + 1)
    # first t with tail[t] <= j. The loosest threshold accepting at most j
    # impostors sits just above values[t - 1], so every mated score strictly
    # above that value is accepted.
    t = np.searchsorted(-tail, -j, side="left")
    lower = np.where(t > 0, values[np.maximum(t - 1, 0)], -np.inf)
    tar = (len(mated) - np.searchsorted(mated, lower, side="right")) / len(mated)
    return tar, j / n


def partial_auc(mated, impostor, far_cap: float = DEFAULT_PAUC_CAP) -> float:
    """Normalized area under the step ROC for FAR in [0, far_cap]."""
    if not 0 < far_cap <= 1:
        raise ValueError("far_cap must lie in (0, 1]")
    mated = _scores(mated)
    imp = _scores(impostor)
    if len(mated) == 0:
        raise EmptyInput("no mated scores")
    if len(imp) == 0:
        raise EmptyImpostors("no impostor scores")
    if len(imp) < 1.0 / far_cap:
        warnings.warn(
            f"{len(imp)} impostors cannot resolve FAR below {1 / len(imp):.2e} "
            f"(cap {far_cap:.1e})",
            PrecisionWarning,
            stacklevel=2,
        )
    tar, far = roc_steps(mated, imp)
    n = len(imp)
    lo = far
    hi = np.minimum((np.arange(n + 1) + 1) / n, far_cap)
    width = np.clip(hi - lo, 0.0, None)
    return float(np.sum(tar * width) / far_cap)


def eer_threshold(mated, impostor) -> OperatingPoint:
    """Threshold minimizing |FAR - FRR|; ties resolve to the middle of the optimal range."""
    mated = _scores(mated)
    imp = _scores(impostor)
    if len(mated) == 0 or len(imp) == 0:
        raise EmptyInput("EER needs mated and impostor scores")
    s = np.unique(np.concatenate([mated, imp]))
    # interval t covers (s[t-1], s[t]] with s[-1] = -inf and s[len] = +inf;
    # inside it FAR = #imp >= s[t] and FRR = #mated <= s[t-1]
    lo = np.concatenate([[-np.inf], s])
    hi = np.concatenate([s, [np.inf]])
    imp_sorted = np.sort(imp)
    mated_sorted = np.sort(mated)
    far = (len(imp) - np.searchsorted(imp_sorted, hi, side="left")) / len(imp)
    frr = np.searchsorted(mated_sorted, lo, side="right") / len(mated)
    gap = np.abs(far - frr)
    best = np.flatnonzero(gap == gap.min())
    run_end = best[0]
    while run_end + 1 in best:
        run_end += 1
    a, b = lo[best[0]], hi[run_end]
    if np.isinf(a) and np.isinf(b):
        tau = 0.0
    elif np.isinf(a):
        tau = float(b)
    elif np.isinf(b):
        tau = float(np.nextafter(a, np.inf))
    else:
        tau = float((a + b) / 2)
        if tau <= a:  # adjacent floats
            tau = float(b)
    fa = accept_count(imp, tau)
    return OperatingPoint(
        tau=tau,
        target_far=None,
        achieved_far=fa / len(imp),
        false_accepts=fa,
        impostor_count=len(imp),
        mode="min-eer",
    )


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        raise EmptyInput("Wilson interval needs n > 0")
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    z2 = z * z
    denom = 1 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    # the bounds are exactly 0 and 1 at the extremes; avoid cancellation residue
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return lo, hi


def verification_rate(scores, tau: float) -> tuple[float, tuple[float, float]]:
    """Percent of cross-model comparisons at or above tau, with a 95% Wilson CI (percent)."""
    s = _scores(scores)
    if len(s) == 0:
        raise EmptyInput("no scores")
    k = accept_count(s, tau)
    lo, hi = wilson_interval(k, len(s))
    return 100.0 * k / len(s), (100.0 * lo, 100.0 * hi)


def seed_aggregate(
    per_seed,
    *,
    method: str = "t",
    confidence: float = 0.95,
    n_boot: int = 2000,
    rng_seed: int = 0,
) -> MetricResult:
    """Mean over seeds with a Student-t (default) or percentile-bootstrap interval.

    Values are rates, so the interval is clipped to [0, 1].
    """
    vals = _scores(per_seed)
    if len(vals) == 0:
        raise EmptyInput("no per-seed values")
    mean = float(vals.mean())
    if len(vals) < 2:
        return MetricResult(mean, None, None, 1, vals.tolist(), ci_method="undefined")
    if method == "t":
        half = stats.t.ppf(0.5 + confidence / 2, len(vals) - 1) * vals.std(ddof=1) / math.sqrt(len(vals))
        lo, hi = mean - half, mean + half
    elif method == "bootstrap":
        lo, hi = bootstrap_ci(vals, n_boot=n_boot, confidence=confidence, rng_seed=rng_seed)
    else:
        raise ValueError(f"unknown CI method {method!r}")
    return MetricResult(mean, float(max(lo, 0.0)), float(min(hi, 1.0)), len(vals), vals.tolist(), ci_method=method)


def bootstrap_ci(values, *, n_boot: int = 2000, confidence: float = 0.95, rng_seed: int = 0):
    vals = _scores(values)
    if len(vals) == 0:
        raise EmptyInput("no values to bootstrap")
    rng = np.random.default_rng(rng_seed)
    idx = rng.integers(0, len(vals), size=(n_boot, len(vals)))
    means = vals[idx].mean(axis=1)
    alpha = 1 - confidence
    return float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2))
