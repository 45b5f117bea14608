"""Group-wise evaluation and multi-seed aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datagen import GroupedDataset
from .model import MlpSpec, predict

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    per_group_acc: dict[int, float]
    group_counts_test: dict[int, int]
    group_correct: dict[int, int]
    train_proportions: dict[int, float] | None = None
    worst_group_acc: float = field(init=False)
    weighted_avg_acc: float | None = field(init=False)
    overall_acc: float = field(init=False)
    in_sample: bool = False

    def __post_init__(self):
        self.worst_group_acc = worst_group_accuracy(self.per_group_acc)
        total = sum(self.group_counts_test.values())
        self.overall_acc = sum(self.group_correct.values()) / total
        self.weighted_avg_acc = (
            weighted_average_accuracy(self.per_group_acc, self.train_proportions)
            if self.train_proportions is not None else None
        )

    def to_dict(self) -> dict:
        return {
            "per_group_acc": {str(g): v for g, v in self.per_group_acc.items()},
            "group_counts_test": {str(g): v for g, v in self.group_counts_test.items()},
            "group_correct": {str(g): v for g, v in self.group_correct.items()},
            "train_proportions": None if self.train_proportions is None
            else {str(g): v for g, v in self.train_proportions.items()},
            "worst_group_acc": self.worst_group_acc,
            "weighted_avg_acc": self.weighted_avg_acc,
            "overall_acc": self.overall_acc,
            "in_sample": self.in_sample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        def ints(m):
            return {int(k): v for k, v in m.items()}

        return cls(
            per_group_acc=ints(d["per_group_acc"]),
            group_counts_test=ints(d["group_counts_test"]),
            group_correct=ints(d["group_correct"]),
            train_proportions=None if d.get("train_proportions") is None else ints(d["train_proportions"]),
            in_sample=d.get("in_sample", False),
        )


def _group_tally(params, spec: MlpSpec, test: GroupedDataset):
    if len(test) == 0:
        raise ValueError("test set is empty")
    correct = predict(params, spec, test.x) == test.y
    g = test.g
    counts = np.bincount(g, minlength=test.n_groups)
    hits = np.bincount(g, weights=correct, minlength=test.n_groups)
    absent = [k for k in range(test.n_groups) if counts[k] == 0]
    if absent:
        log.info("groups %s are absent from the %s split and are left out", absent, test.split_tag)
    present = [k for k in range(test.n_groups) if counts[k] > 0]
    return {k: int(counts[k]) for k in present}, {k: int(hits[k]) for k in present}


def per_group_accuracy(params, spec: MlpSpec, test: GroupedDataset) -> dict[int, float]:
    counts, hits = _group_tally(params, spec, test)
    return {k: hits[k] / counts[k] for k in counts}


def worst_group_accuracy(report: EvalReport | Mapping[int, float]) -> float:
    accs = report.per_group_acc if isinstance(report, EvalReport) else report
    if not accs:
        raise ValueError("report has no groups")
    return min(accs.values())


def as_proportions(proportions, groups: Iterable[int]) -> dict[int, float]:
    if isinstance(proportions, Mapping):
        return {int(k): float(v) for k, v in proportions.items()}
    return {k: float(v) for k, v in enumerate(proportions)}


def weighted_average_accuracy(report: EvalReport | Mapping[int, float], train_proportions) -> float:
    """``sum_g p_g * acc_g`` over the groups of the report.

    Proportions may be a mapping or a sequence indexed by group id. Groups
    with zero proportion may be missing from the report; every group with
    positive proportion must be present.
    """
    accs = report.per_group_acc if isinstance(report, EvalReport) else report
    props = as_proportions(train_proportions, accs)
    if abs(math.fsum(props.values()) - 1.0) > 1e-9:
        raise ValueError("train proportions must sum to 1")
    extra = {g for g, p in props.items() if p > 0} - set(accs)
    missing = set(accs) - set(props)
    if extra or missing:
        raise ValueError(f"group sets differ: proportions-only {sorted(extra)}, report-only {sorted(missing)}")
    return math.fsum(props[g] * accs[g] for g in accs)


def evaluate(params, spec: MlpSpec, test: GroupedDataset, train_proportions=None) -> EvalReport:
    counts, hits = _group_tally(params, spec, test)
    props = None
    if train_proportions is not None:
        props = as_proportions(train_proportions, counts)
        props = {g: p for g, p in props.items() if p > 0 or g in counts}
    return EvalReport(
        per_group_acc={k: hits[k] / counts[k] for k in counts},
        group_counts_test=counts,
        group_correct=hits,
        train_proportions=props,
        in_sample=test.split_tag == "train",
    )


def aggregate(reports: Sequence[EvalReport] | Mapping[str, Sequence[float]]) -> dict[str, dict]:
    """Mean and standard error of the mean per metric.

    Accepts EvalReports (worst-group, weighted-average and overall accuracy)
    or a mapping of metric name to raw values. With one value the standard
    error is reported as 0 and ``se_defined`` is False.
    """
    if isinstance(reports, Mapping):
        series = {k: list(v) for k, v in reports.items()}
    else:
        if not reports:
            raise ValueError("nothing to aggregate")
        series = {
            "worst_group_acc": [r.worst_group_acc for r in reports],
            "overall_acc": [r.overall_acc for r in reports],
        }
        if all(r.weighted_avg_acc is not None for r in reports):
            series["weighted_avg_acc"] = [r.weighted_avg_acc for r in reports]
    out = {}
    for name, values in series.items():
        v = [float(x) for x in values]
        n = len(v)
        if n == 0:
            raise ValueError(f"no values for {name}")
        # statistics works in exact rationals, so identical values give se == 0
        se = statistics.stdev(v) / math.sqrt(n) if n > 1 else 0.0
        out[name] = {"mean": statistics.fmean(v), "se": se, "n": n, "se_defined": n > 1}
    return out


# -- persistence -------------------------------------------------------------

def write_report_json(path, report: EvalReport, extra: dict | None = None) -> Path:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


REPORT_CSV_HEADER = ["method", "seed", "group", "acc", "wga", "avg"]


def report_rows(method: str, seed: int, report: EvalReport) -> list[list]:
    avg = report.weighted_avg_acc if report.weighted_avg_acc is not None else report.overall_acc
    return [[method, seed, g, repr(acc), repr(report.worst_group_acc), repr(avg)]
            for g, acc in sorted(report.per_group_acc.items())]


def write_report_csv(path, rows: Iterable[list]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_CSV_HEADER)
        w.writerows(rows)
    return path
