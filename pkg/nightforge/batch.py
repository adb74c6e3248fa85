"""Per-image batch execution on a worker pool with ordered, auditable results."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

from .errors import NightforgeError

try:
    from tabulate import tabulate
except ImportError:  # pragma: no cover - fallback when tabulate not installed
    tabulate = None  # type: ignore

logger = logging.getLogger(__name__)

REPORT_JSON = "run_report.json"
REPORT_CSV = "run_report.csv"


class BatchAborted(NightforgeError):
    """Raised in strict mode when a task fails."""

    def __init__(self, result: "TaskResult") -> None:
        super().__init__(f"Task {result.index} ({result.name}) failed: {result.error}")
        self.result = result


@dataclass(frozen=True)
class ImageTask:
    """Immutable descriptor handed to a worker."""

    index: int
    name: str
    source: Optional[Path] = None
    destination: Optional[Path] = None


@dataclass
class TaskOutput:
    metrics: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)


@dataclass
class TaskResult:
    """Outcome of one task."""

    index: int
    name: str
    status: str
    queued_at: float
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    error: Optional[str] = None
    warnings: List[str] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def elapsed(self) -> Optional[float]:
        if self.started_at is None or self.finished_at is None:
            return None
        return self.finished_at - self.started_at

    def as_row(self) -> Dict[str, Any]:
        row = {
            "index": self.index,
            "name": self.name,
            "status": self.status,
            "seconds": self.elapsed,
            "warnings": "; ".join(self.warnings),
            "error": self.error or "",
        }
        row.update(self.metrics)
        return row


@dataclass
class RunReport:
    command: str
    results: List[TaskResult]
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def succeeded(self) -> int:
        return sum(1 for r in self.results if r.status == "succeeded")

    @property
    def failed(self) -> int:
        return sum(1 for r in self.results if r.status == "failed")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.as_row() for r in self.results])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "metrics": dict(self.metrics),
            "results": [asdict(r) for r in self.results],
        }

    def write(self, output_dir: Union[str, Path]) -> Path:
        target = Path(output_dir)
        target.mkdir(parents=True, exist_ok=True)
        (target / REPORT_JSON).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        self.to_frame().to_csv(target / REPORT_CSV, index=False)
        return target / REPORT_JSON

    def render(self) -> str:
        warned = sum(1 for r in self.results if r.warnings)
        rows = [[self.command, len(self.results), self.succeeded, self.failed, warned]]
        summary = render_table(rows, ["Command", "Images", "Succeeded", "Failed", "With warnings"])
        failures = [[r.name, r.error] for r in self.results if r.status == "failed"]
        if failures:
            summary += "\n\n" + render_table(failures, ["Failed image", "Error"])
        return summary


def aggregate_metrics(results: Sequence[TaskResult], wall_seconds: float) -> Dict[str, float]:
    """Batch totals plus the mean of every per-image metric over the succeeded tasks."""

    succeeded = [r for r in results if r.status == "succeeded"]
    totals: Dict[str, float] = {
        "images": float(len(results)),
        "succeeded": float(len(succeeded)),
        "failed": float(len(results) - len(succeeded)),
        "warnings": float(sum(len(r.warnings) for r in results)),
        "wall_seconds": wall_seconds,
    }
    frame = pd.DataFrame([r.metrics for r in succeeded])
    if not frame.empty:
        for name, value in frame.mean(numeric_only=True).items():
            totals[f"mean_{name}"] = float(value)
    return totals


def render_table(rows: Sequence[Sequence[Any]], headers: Sequence[str]) -> str:
    rows = [list(row) for row in rows]
    if tabulate:
        return tabulate(rows, headers=list(headers), tablefmt="github")
    # Simple fallback rendering
    column_widths = [max(len(str(row[i])) for row in rows + [list(headers)]) for i in range(len(headers))]
    lines_out = [
        " | ".join(h.ljust(column_widths[idx]) for idx, h in enumerate(headers)),
        "-+-".join("-" * column_widths[idx] for idx in range(len(headers))),
    ]
    for row in rows:
        lines_out.append(" | ".join(str(cell).ljust(column_widths[idx]) for idx, cell in enumerate(row)))
    return "\n".join(lines_out)


TaskFn = Callable[[ImageTask], Optional[TaskOutput]]


def process_task(task: ImageTask, fn: TaskFn, queued_at: Optional[float] = None) -> TaskResult:
    """Run ``fn`` on one task, turning any exception it raises into a failed result."""

    result = TaskResult(
        index=task.index,
        name=task.name,
        status="running",
        queued_at=queued_at if queued_at is not None else time.time(),
        started_at=time.time(),
    )
    try:
        output = fn(task) or TaskOutput()
    except Exception as exc:
        result.status = "failed"
        result.error = str(exc) or type(exc).__name__
        if isinstance(exc, (NightforgeError, OSError, ValueError)):
            logger.warning("Task %d (%s) failed: %s", task.index, task.name, exc)
        else:
            logger.exception("Task %d (%s) raised %s", task.index, task.name, type(exc).__name__)
    else:
        result.status = "succeeded"
        result.metrics = dict(output.metrics)
        result.warnings = list(output.warnings)
    result.finished_at = time.time()
    return result


def run_tasks(
    tasks: Iterable[ImageTask],
    fn: TaskFn,
    *,
    workers: int = 1,
    strict: bool = False,
    command: str = "batch",
) -> RunReport:
    """Run ``fn`` over ``tasks`` and return results in task order.

    Workers only receive task descriptors, so the outputs do not depend on ``workers``. In
    strict mode the first failure, in task order, cancels queued work and raises
    ``BatchAborted``.
    """

    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}.")
    task_list = list(tasks)
    queued_at = time.time()
    results: List[TaskResult] = []
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="nightforge") as pool:
        futures: List[Future] = [pool.submit(process_task, task, fn, queued_at) for task in task_list]
        for future in futures:
            result = future.result()
            results.append(result)
            if strict and result.status == "failed":
                for pending in futures:
                    pending.cancel()
                raise BatchAborted(result)

    report = RunReport(command=command, results=results)
    report.metrics = aggregate_metrics(results, time.time() - queued_at)
    logger.info("%s: %d task(s), %d failed", command, len(results), report.failed)
    return report


__all__ = [
    "BatchAborted",
    "ImageTask",
    "RunReport",
    "TaskOutput",
    "TaskResult",
    "aggregate_metrics",
    "process_task",
    "render_table",
    "run_tasks",
]
