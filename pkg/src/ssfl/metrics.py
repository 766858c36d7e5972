"""Binary classification metrics and multi-run averaging.

Undefined ratios (zero denominators) are reported as ``None`` instead of 0
so they drop out of run averages rather than dragging them down.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional, Sequence

from .errors import EmptyInput, LengthMismatch

UNDEFINED = None


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


@dataclass(frozen=True)
class MetricReport:
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    f1_positive: Optional[float]
    f1_negative: Optional[float]
    macro_f1: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = tuple(f.name for f in fields(MetricReport))


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise EmptyInput("no samples to evaluate")
    tp = fn = tn = fp = 0
    for p, y in zip(predictions, labels):
        if y:
            if p:
                tp += 1
            else:
                fn += 1
        elif p:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fn, tn, fp)


def _ratio(num, den):
    return num / den if den else UNDEFINED


def _f1(tp, fp, fn):
    # harmonic mean of precision and recall, written so that a class that is
    # never predicted scores 0 rather than undefined
    return _ratio(2 * tp, 2 * tp + fp + fn)


def report(cm: ConfusionMatrix) -> MetricReport:
    f1_pos = _f1(cm.tp, cm.fp, cm.fn)
    f1_neg = _f1(cm.tn, cm.fn, cm.fp)
    macro = None if f1_pos is None or f1_neg is None else (f1_pos + f1_neg) / 2
    return MetricReport(
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        f1_positive=f1_pos,
        f1_negative=f1_neg,
        macro_f1=macro,
    )


class RunAggregate(NamedTuple):
    mean: MetricReport
    std: MetricReport
    counts: dict        # metric name -> number of runs where it was defined


def aggregate_runs(reports: Sequence[MetricReport]) -> RunAggregate:
    """Per-metric mean and sample standard deviation over runs."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    means, stds, counts = {}, {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        counts[name] = len(vals)
        if not vals:
            means[name] = stds[name] = UNDEFINED
            continue
        mu = math.fsum(vals) / len(vals)
        means[name] = mu
        if len(vals) < 2:
            stds[name] = UNDEFINED
        else:
            stds[name] = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / (len(vals) - 1))
    return RunAggregate(MetricReport(**means), MetricReport(**stds), counts)
