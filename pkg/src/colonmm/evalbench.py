"""Benchmark harness: accuracy for CLS/REG, IoU for REC, report emission.

Predictions are parsed from raw generated text; parsing never raises, a
failed parse is data (counted and scored as wrong / IoU 0). Seen metrics
come from validation-split records, unseen from test-split records. CAP has
no headline metric; a keyword-presence diagnostic is reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .compiler import InstructionRecord
from .errors import ColonmmError, DataError, UsageError
from .taxonomy import (
    BBox,
    PERMILLE_GRID,
    Split,
    decode_bbox,
    normalize_name,
    round_half_away_from_zero,
)

HEADLINE_TASKS = ("CLS", "REG", "REC")
SPLIT_LABELS = {Split.VAL: "seen", Split.TEST: "unseen"}
PARSE_ERROR = "parse_error"


def normalize_category(text: str) -> str:
    """Canonical category string: lowercase, trimmed, collapsed whitespace."""
    return normalize_name(text)


@dataclass(frozen=True)
class Prediction:
    record_id: str
    task: str
    raw: str
    category: str | None = None
    box: BBox | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def parse_prediction(task: str, record_id: str, raw: str,
                     image_size: tuple[int, int] = (PERMILLE_GRID, PERMILLE_GRID)) -> Prediction:
    """Extract the task payload from raw text; failures become data."""
    if task in ("CLS", "REG", "CAP"):
        return Prediction(record_id=record_id, task=task, raw=raw, category=normalize_category(raw))
    if task == "REC":
        try:
            box = decode_bbox(raw, image_size[0], image_size[1])
        except ColonmmError as exc:
            return Prediction(record_id=record_id, task=task, raw=raw, error=str(exc) or PARSE_ERROR)
        return Prediction(record_id=record_id, task=task, raw=raw, box=box)
    raise UsageError(f"unknown task '{task}'")


def score_accuracy(predictions: Sequence[Prediction], gold: Sequence[tuple[str, str]]) -> float:
    """Fraction of predictions whose normalized category matches gold.

    ``gold`` is aligned (record_id, category) pairs; parse failures count as
    incorrect.
    """
    if len(predictions) != len(gold) or not predictions:
        raise DataError("accuracy needs equally sized, non-empty aligned inputs")
    correct = 0
    for pred, (record_id, category) in zip(predictions, gold):
        if pred.record_id != record_id:
            raise DataError(f"alignment error: {pred.record_id} vs {record_id}")
        if not pred.failed and pred.category == normalize_category(category):
            correct += 1
    return correct / len(predictions)


def score_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes in the same frame."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def mean_iou(predictions: Sequence[Prediction], gold: Sequence[tuple[str, BBox]]) -> float:
    """Mean IoU over aligned pairs; parse failures contribute 0."""
    if len(predictions) != len(gold) or not predictions:
        raise DataError("IoU needs equally sized, non-empty aligned inputs")
    total = 0.0
    for pred, (record_id, box) in zip(predictions, gold):
        if pred.record_id != record_id:
            raise DataError(f"alignment error: {pred.record_id} vs {record_id}")
        if pred.box is not None:
            total += score_iou(pred.box, box)
    return total / len(predictions)


@dataclass(frozen=True)
class TaskMetrics:
    task: str
    samples: int
    metric: float  # accuracy for CLS/REG, mean IoU for REC
    parse_errors: int

    def __post_init__(self):
        if not (0.0 <= self.metric <= 1.0):
            raise DataError(f"metric {self.metric} outside [0, 1]")
        if self.parse_errors > self.samples:
            raise DataError("more parse errors than samples")


@dataclass
class BenchmarkReport:
    model_label: str
    cells: dict[tuple[str, str], TaskMetrics] = field(default_factory=dict)  # (task, "seen"/"unseen")
    cap_keyword_presence: dict[str, float] = field(default_factory=dict)  # split label -> fraction

    def metric(self, task: str, split_label: str) -> TaskMetrics | None:
        return self.cells.get((task, split_label))


def run_benchmark(generate: Callable[[InstructionRecord], str],
                  records: Sequence[InstructionRecord],
                  model_label: str = "model",
                  prediction_sink: list | None = None) -> BenchmarkReport:
    """Generate once per record (deterministic record_id order), parse, and
    aggregate per task and split.

    Generation failures are recorded as parse errors; the run continues.
    ``prediction_sink``, when given, collects (record, Prediction) pairs for
    dumping.
    """
    usable = [r for r in records if r.split in SPLIT_LABELS]
    for task in HEADLINE_TASKS:
        present = {r.split for r in usable if r.task == task}
        if present and present != set(SPLIT_LABELS):
            raise UsageError(
                f"task {task} needs both validation and test records, has "
                f"{sorted(s.value for s in present)}"
            )

    report = BenchmarkReport(model_label=model_label)
    groups: dict[tuple[str, str], list[InstructionRecord]] = {}
    for record in sorted(usable, key=lambda r: r.record_id):
        groups.setdefault((record.task, SPLIT_LABELS[record.split]), []).append(record)

    for (task, split_label), group in sorted(groups.items()):
        predictions: list[Prediction] = []
        for record in group:
            try:
                raw = generate(record)
            except Exception as exc:
                predictions.append(Prediction(
                    record_id=record.record_id, task=task, raw="",
                    error=f"generation failed: {exc}",
                ))
                continue
            predictions.append(parse_prediction(task, record.record_id, raw))
        if prediction_sink is not None:
            prediction_sink.extend(zip(group, predictions))
        parse_errors = sum(1 for p in predictions if p.failed)

        if task in ("CLS", "REG"):
            gold = [(r.record_id, r.response) for r in group]
            value = score_accuracy(predictions, gold)
        elif task == "REC":
            gold = [
                (r.record_id, decode_bbox(r.bbox_text, PERMILLE_GRID, PERMILLE_GRID))
                for r in group
            ]
            value = mean_iou(predictions, gold)
        else:  # CAP diagnostic: does the caption mention the gold category?
            hits = sum(
                1 for p, r in zip(predictions, group)
                if not p.failed and normalize_category(r.category) in (p.category or "")
            )
            report.cap_keyword_presence[split_label] = hits / len(group)
            continue
        report.cells[(task, split_label)] = TaskMetrics(
            task=task, samples=len(group), metric=value, parse_errors=parse_errors,
        )
    return report


# ---------------------------------------------------------------------------
# Report emission

REPORT_FORMATS = ("plain-table", "comma-separated")
_COLUMNS = [(task, split) for task in HEADLINE_TASKS for split in ("seen", "unseen")]


def format_percent(value: float) -> str:
    return f"{round_half_away_from_zero(value * 10000) / 100:.2f}%"


def emit_report(reports: BenchmarkReport | Sequence[BenchmarkReport], fmt: str = "plain-table") -> str:
    """Render one row per model: CLS(A), REG(A), REC(IoU), each seen/unseen."""
    if isinstance(reports, BenchmarkReport):
        reports = [reports]
    if fmt not in REPORT_FORMATS:
        raise UsageError(f"unknown report format '{fmt}'")

    header = ["model"] + [f"{task} {split} ({'IoU' if task == 'REC' else 'A'})"
                          for task, split in _COLUMNS]
    rows = [header]
    for report in reports:
        row = [report.model_label]
        for task, split in _COLUMNS:
            cell = report.metric(task, split)
            row.append(format_percent(cell.metric) if cell is not None else "-")
        rows.append(row)

    if fmt == "comma-separated":
        return "\n".join(",".join(row) for row in rows) + "\n"

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for r, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(widths[i]) if i else cell.ljust(widths[i])
                               for i, cell in enumerate(row)))
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
