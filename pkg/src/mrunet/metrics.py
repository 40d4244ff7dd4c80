"""Binary segmentation metrics and the paired one-tailed t-test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import DegenerateVarianceError, ShapeError, ValidationError

ALPHA = 0.05
METRICS = ("dsc", "sensitivity", "specificity")


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """Foreground where p >= threshold (ties go to foreground)."""
    p = np.asarray(probs)
    if p.size and (np.nanmin(p) < 0 or np.nanmax(p) > 1 or np.isnan(p).any()):
        raise ValidationError("probabilities must lie in [0, 1]")
    return p >= threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, ref) -> ConfusionCounts:
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    for name, m in (("prediction", pred), ("reference", ref)):
        if m.dtype != bool and not np.all((m == 0) | (m == 1)):
            raise ValidationError(f"{name} mask must be binary")
    p = pred.astype(bool)
    r = ref.astype(bool)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def rates(c: ConfusionCounts) -> Dict[str, float]:
    """DSC, sensitivity and specificity in percent.

    A 0/0 ratio (reference class empty) scores 100 when the prediction
    agrees and 0 otherwise.
    """
    if c.tp + c.fp + c.fn == 0:
        dsc = 100.0
    else:
        dsc = 200.0 * c.tp / (2 * c.tp + c.fp + c.fn)
    if c.tp + c.fn == 0:
        sens = 100.0 if c.fp == 0 else 0.0
    else:
        sens = 100.0 * c.tp / (c.tp + c.fn)
    if c.tn + c.fp == 0:
        spec = 100.0 if c.fn == 0 else 0.0
    else:
        spec = 100.0 * c.tn / (c.tn + c.fp)
    return {"dsc": dsc, "sensitivity": sens, "specificity": spec}


def segmentation_metrics(pred, ref):
    """Returns (counts, dsc %, sensitivity %, specificity %)."""
    c = confusion(pred, ref)
    r = rates(c)
    return c, r["dsc"], r["sensitivity"], r["specificity"]


def mean_sd(values: Sequence[float]):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("no values to aggregate")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


@dataclass
class MetricsReport:
    ids: List[str] = field(default_factory=list)
    dsc: List[float] = field(default_factory=list)
    sensitivity: List[float] = field(default_factory=list)
    specificity: List[float] = field(default_factory=list)

    def add(self, identifier: str, pred, ref) -> ConfusionCounts:
        c, d, se, sp = segmentation_metrics(pred, ref)
        self.ids.append(identifier)
        self.dsc.append(d)
        self.sensitivity.append(se)
        self.specificity.append(sp)
        return c

    def __len__(self) -> int:
        return len(self.ids)

    def aggregate(self) -> Dict[str, tuple]:
        return {m: mean_sd(getattr(self, m)) for m in METRICS}

    def summary(self) -> str:
        agg = self.aggregate()
        return "  ".join(f"{m} {mu:.1f}±{sd:.1f}%" for m, (mu, sd) in agg.items())

    def to_dict(self) -> dict:
        agg = self.aggregate()
        return {
            "per_image": [
                {"id": i, "dsc": d, "sensitivity": se, "specificity": sp}
                for i, d, se, sp in zip(self.ids, self.dsc, self.sensitivity, self.specificity)
            ],
            "aggregate": {m: {"mean": mu, "sd": sd} for m, (mu, sd) in agg.items()},
        }


def write_metrics_csv(report: MetricsReport, path) -> Path:
    """Per-image rows ``id,dsc,sensitivity,specificity`` and one footer row
    ``aggregate,dsc_mean,dsc_sd,sensitivity_mean,sensitivity_sd,specificity_mean,specificity_sd``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *METRICS])
        for row in zip(report.ids, report.dsc, report.sensitivity, report.specificity):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        agg = report.aggregate()
        w.writerow(["aggregate", *(repr(x) for m in METRICS for x in agg[m])])
    return path


def read_metrics_csv(path) -> MetricsReport:
    report = MetricsReport()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", *METRICS]:
        raise ValidationError(f"{path}: not a metrics CSV")
    for row in rows[1:]:
        if row and row[0] == "aggregate":
            break
        report.ids.append(row[0])
        report.dsc.append(float(row[1]))
        report.sensitivity.append(float(row[2]))
        report.specificity.append(float(row[3]))
    return report


# ---------------------------------------------------------------------------
# Student's t


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValidationError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper-tail probability P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValidationError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    significant: bool
    mean_diff: float = 0.0

    def to_dict(self) -> dict:
        return {"t": self.t, "df": self.df, "p": self.p, "significant": self.significant, "mean_diff": self.mean_diff}


def paired_t_one_tailed(a: Sequence[float], b: Sequence[float], alpha: float = ALPHA) -> TTestResult:
    """Test H0 "b does not improve on a" against H1 mean(b - a) > 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"paired samples must be equal-length 1-D lists, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValidationError(f"need at least 2 pairs, got {n}")
    d = b - a
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("all paired differences are identical; t is undefined")
    mean = float(d.mean())
    t = mean / (sd / math.sqrt(n))
    p = t_sf(t, n - 1)
    return TTestResult(t=t, df=n - 1, p=p, significant=p < alpha, mean_diff=mean)
