"""Aggregation of run records and verdicts into reported quantities.

All reductions sort records by item_id first so floating summation order is
fixed. Error-status answers count as incorrect rather than being dropped,
which keeps every denominator at the full question count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import DataError
from .parsing import JUDGE_LABELS

LABEL_ENTAILED = "ENTAILED"
LABEL_USEFUL = "USEFUL_BUT_NOT_ENTAILED"
LABEL_NOT_USEFUL = "NOT_USEFUL"


@dataclass(frozen=True)
class RunKey:
    """The aggregation unit: one dataset, one method, one model."""

    dataset: str
    method: str
    model: str


@dataclass(frozen=True)
class RecordView:
    """The slice of a run record that metrics care about."""

    item_id: str
    choice: str | None
    status: str = "ok"

    @property
    def answered(self) -> bool:
        return self.status == "ok" and self.choice is not None


@dataclass(frozen=True)
class LabelCounts:
    n_entailed: int
    n_useful: int
    n_not_useful: int

    @property
    def n_total(self) -> int:
        return self.n_entailed + self.n_useful + self.n_not_useful


@dataclass
class MetricReport:
    key: RunKey
    n: int
    accuracy: float
    counts: LabelCounts | None = None
    dur_value: float | None = None
    coverage: float | None = None
    label_fractions: dict[str, float] = field(default_factory=dict)
    per_label: dict[str, dict] = field(default_factory=dict)


def _is_correct(record: RecordView, gold_map: Mapping[str, str]) -> bool:
    if record.item_id not in gold_map:
        raise DataError(f"no gold answer for item {record.item_id!r}")
    return record.answered and record.choice == gold_map[record.item_id]


def accuracy(records: Sequence[RecordView], gold_map: Mapping[str, str]) -> float:
    """Fraction correct; error-status records count as incorrect."""
    if not records:
        raise DataError("accuracy over an empty record set is undefined")
    ordered = sorted(records, key=lambda r: r.item_id)
    correct = sum(1 for r in ordered if _is_correct(r, gold_map))
    return correct / len(ordered)


def dur(counts: LabelCounts) -> float:
    """Decision-useful rate: (entailed + useful) over all questions."""
    if counts.n_total <= 0:
        raise DataError("decision-useful rate over zero records is undefined")
    return (counts.n_entailed + counts.n_useful) / counts.n_total


def label_counts(
    records: Sequence[RecordView],
    verdicts: Mapping[str, str],
    strict: bool = False,
) -> tuple[LabelCounts, float]:
    """Tally verdict labels over a record set.

    By default a record without a usable verdict counts as NOT_USEFUL so
    the denominator stays at the question count; strict mode excludes such
    records and surfaces the judged fraction as coverage.
    """
    n = {label: 0 for label in JUDGE_LABELS}
    judged = 0
    for record in sorted(records, key=lambda r: r.item_id):
        label = verdicts.get(record.item_id)
        if label in n:
            n[label] += 1
            judged += 1
        elif not strict:
            n[LABEL_NOT_USEFUL] += 1
    coverage = judged / len(records) if records else 0.0
    return (
        LabelCounts(
            n_entailed=n[LABEL_ENTAILED],
            n_useful=n[LABEL_USEFUL],
            n_not_useful=n[LABEL_NOT_USEFUL],
        ),
        coverage,
    )


def utility_sliced_accuracy(
    records: Sequence[RecordView],
    verdicts: Mapping[str, str],
    label: str,
    gold_map: Mapping[str, str],
) -> tuple[float, int] | None:
    """Accuracy restricted to records whose verdict carries `label`.

    Returns None for an empty slice; absence is not zero.
    """
    sliced = [r for r in records if verdicts.get(r.item_id) == label]
    if not sliced:
        return None
    return accuracy(sliced, gold_map), len(sliced)


def delta_cot(
    method_records: Sequence[RecordView],
    cot_records: Sequence[RecordView],
    verdicts: Mapping[str, str],
    label: str,
    gold_map: Mapping[str, str],
) -> float | None:
    """Same-subset accuracy gain of a method over the no-retrieval baseline.

    The baseline is evaluated on exactly the items whose retrieved context
    earned `label` under the method, which controls for subset composition.
    """
    sliced = [r for r in method_records if verdicts.get(r.item_id) == label]
    if not sliced:
        return None
    slice_ids = {r.item_id for r in sliced}
    cot_by_id = {r.item_id: r for r in cot_records}
    missing = sorted(slice_ids - set(cot_by_id))
    if missing:
        raise DataError(f"no baseline record for slice items {missing}")
    cot_slice = [cot_by_id[i] for i in sorted(slice_ids)]
    return accuracy(sliced, gold_map) - accuracy(cot_slice, gold_map)


def build_report(
    key: RunKey,
    records: Sequence[RecordView],
    gold_map: Mapping[str, str],
    verdicts: Mapping[str, str] | None = None,
    cot_records: Sequence[RecordView] | None = None,
    strict_unjudged: bool = False,
) -> MetricReport:
    """Assemble the full per-key report: accuracy, rates, and label slices."""
    report = MetricReport(key=key, n=len(records), accuracy=accuracy(records, gold_map))
    if verdicts is None:
        return report
    counts, coverage = label_counts(records, verdicts, strict=strict_unjudged)
    report.counts = counts
    report.coverage = coverage
    if counts.n_total > 0:
        report.dur_value = dur(counts)
        report.label_fractions = {
            LABEL_ENTAILED: counts.n_entailed / counts.n_total,
            LABEL_USEFUL: counts.n_useful / counts.n_total,
            LABEL_NOT_USEFUL: counts.n_not_useful / counts.n_total,
        }
    for label in JUDGE_LABELS:
        sliced = utility_sliced_accuracy(records, verdicts, label, gold_map)
        entry: dict = {"n": 0, "accuracy": None, "delta_cot": None}
        if sliced is not None:
            entry["accuracy"], entry["n"] = sliced
            if cot_records is not None:
                entry["delta_cot"] = delta_cot(
                    records, cot_records, verdicts, label, gold_map
                )
        report.per_label[label] = entry
    return report


def pct(value: float | None) -> str:
    """One-decimal percentage string, or a placeholder for absent values."""
    if value is None:
        return "NA"
    return f"{100.0 * value:.1f}"
