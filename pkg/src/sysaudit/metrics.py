"""Performance and indistinguishability metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import DomainError, ShapeError
from .uncertainty import Deviation


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # point k classifies score >= thresholds[k] as signal
    auc: float


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DomainError("both classes must be present")
    if not np.all(np.isfinite(s)):
        raise DomainError("scores must be finite")
    return s, y


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over all distinct thresholds; tied scores form one step."""
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]], auc)


def efficiency_at_rejection(scores, labels, target: float) -> tuple[float, float]:
    """Signal efficiency at the smallest threshold reaching ``target`` rejection.

    Events with ``score > threshold`` are selected; background rejection is
    the fraction of background at or below the threshold.  The threshold is
    ``-inf`` when ``target`` is 0.
    """
    s, y = _check_binary(scores, labels)
    if not 0.0 <= target <= 1.0:
        raise DomainError(f"target rejection {target} is not achievable")
    bkg = np.sort(s[~y])
    candidates = np.r_[-np.inf, np.unique(s)]
    rejection = np.searchsorted(bkg, candidates, side="right") / bkg.size
    # float noise must not make an exactly-reached target look unreached
    k = int(np.argmax(rejection >= target - 1e-12))
    t = float(candidates[k])
    return float(np.mean(s[y] > t)), t


def binomial_se(p: float, n: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / n)) if n > 0 else float("nan")


@dataclass(frozen=True)
class PearsonDelta:
    nominal: np.ndarray
    adversarial: np.ndarray
    max_abs: float


def _corr(x: np.ndarray, ok: np.ndarray) -> np.ndarray:
    c = np.full((x.shape[1],) * 2, np.nan)
    sub = np.corrcoef(x[:, ok], rowvar=False) if ok.sum() > 1 else np.ones((ok.sum(),) * 2)
    c[np.ix_(ok, ok)] = np.atleast_2d(sub)
    np.fill_diagonal(c, np.where(ok, 1.0, np.nan))
    return c


def pearson_delta(nominal, adversarial) -> PearsonDelta:
    """Correlation matrices of both samples and their largest absolute difference.

    Columns constant in either sample are undefined (NaN) and excluded.
    """
    a = np.asarray(nominal, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature matrices {a.shape} and {b.shape} are incompatible")
    if len(a) < 2 or len(b) < 2:
        raise ShapeError("need at least two rows")
    ok = (np.ptp(a, axis=0) > 0) & (np.ptp(b, axis=0) > 0)
    ca, cb = _corr(a, ok), _corr(b, ok)
    d = np.abs(ca - cb)[np.ix_(ok, ok)]
    return PearsonDelta(ca, cb, float(d.max()) if d.size else 0.0)


def hist_chi2_hard(nominal, adversarial, bins: int = 32, reference: str = "pooled") -> np.ndarray:
    """Per-feature chi-square per degree of freedom between two samples.

    Bins span the nominal range per feature; adversarial values outside it
    land in the edge bins.  ``reference="pooled"`` uses the two-sample form
    ``sum (k1*a - k2*n)^2 / (a + n)`` with ``k1 = sqrt(N_n/N_a)``,
    ``k2 = sqrt(N_a/N_n)``, which has unit expectation per degree of freedom
    for independent draws.  ``reference="nominal"`` treats the nominal
    counts as exact: ``sum (a - n)^2 / (n + 1)``.  ndf is the number of
    populated bins minus one.
    """
    a = np.asarray(nominal, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"feature shapes differ: {a.shape} vs {b.shape}")
    if reference not in ("pooled", "nominal"):
        raise DomainError(f"unknown reference {reference!r}")
    out = np.empty(a.shape[1])
    for f in range(a.shape[1]):
        lo, hi = a[:, f].min(), a[:, f].max()
        if hi <= lo:
            raise DomainError(f"feature {f} has fewer than 2 populated bins")
        edges = np.linspace(lo, hi, bins + 1)
        n = np.histogram(a[:, f], edges)[0].astype(np.float64)
        m = np.histogram(np.clip(b[:, f], lo, hi), edges)[0].astype(np.float64)
        populated = (n + m) > 0
        ndf = int(populated.sum()) - 1
        if ndf < 1:
            raise DomainError(f"feature {f} has fewer than 2 populated bins")
        if reference == "pooled":
            k1, k2 = np.sqrt(len(a) / len(b)), np.sqrt(len(b) / len(a))
            chi2 = np.sum((k1 * m[populated] - k2 * n[populated]) ** 2 / (m[populated] + n[populated]))
        else:
            chi2 = np.sum((m - n) ** 2 / (n + 1.0))
        out[f] = chi2 / ndf
    return out


@dataclass(frozen=True)
class ZStats:
    mean: float
    std: float
    skew: float


def z_stats(dev: Deviation | np.ndarray) -> ZStats:
    """Moments of z over perturbable entries; skew uses the bias-corrected estimator."""
    if isinstance(dev, Deviation):
        z = dev.z[dev.valid]
    else:
        z = np.asarray(dev, dtype=np.float64).ravel()
    if z.size == 0:
        raise DomainError("no perturbable entries")
    std = float(z.std())
    if std == 0.0 or z.size < 3:
        return ZStats(float(z.mean()), std, 0.0)
    return ZStats(float(z.mean()), std, float(stats.skew(z, bias=False)))


def boundary_test(nominal_scores, fooled) -> float:
    """One-sided rank-test p-value that fooled events sit closer to 0.5 than all events."""
    s = np.asarray(nominal_scores, dtype=np.float64)
    fooled = np.asarray(fooled, dtype=bool)
    if not fooled.any():
        raise DomainError("no fooled events")
    dist = np.abs(s - 0.5)
    return float(stats.mannwhitneyu(dist[fooled], dist, alternative="less").pvalue)


@dataclass
class MetricBundle:
    efficiency: float
    rejection: float
    auc: float
    fooling_ratio: float | None = None
    chi2_ndf: dict = field(default_factory=dict)
    max_pearson: float | None = None
    z_mean: float | None = None
    z_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(scores, labels, target_rejection: float) -> MetricBundle:
    """AUC, and efficiency/rejection at the working point."""
    s, y = _check_binary(scores, labels)
    eff, t = efficiency_at_rejection(s, y, target_rejection)
    rej = float(np.mean(s[~y] <= t))
    return MetricBundle(eff, rej, roc_auc(s, y).auc)
