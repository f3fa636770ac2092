"""Ablation grid runner and its report."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Sequence

from .data import PuzzleInstance, SplitSpec
from .errors import InputError, MMFuseError
from .model import HeadKind, ModelConfig
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

COLUMNS = ("vision", "text", "align", "pool", "val_acc", "test_acc")


@dataclass(frozen=True)
class AblationRow:
    vision: str
    text: str
    align: str
    pool: str
    val_acc: float
    test_acc: float
    head: HeadKind = HeadKind.Classification
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def best(self, head: HeadKind) -> float:
        """Highest test accuracy among the successful rows using ``head``."""
        scores = [r.test_acc for r in self.rows if r.head is head and r.ok]
        return max(scores, default=float("nan"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([r.vision, r.text, r.align, r.pool, f"{r.val_acc:.4f}", f"{r.test_acc:.4f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        header = ["Vision", "Text", "Align", "Pool", "Val acc", "Test acc"]
        body = []
        for r in self.rows:
            if r.ok:
                accs = [f"{100 * r.val_acc:.2f}%", f"{100 * r.test_acc:.2f}%"]
            else:
                accs = ["failed", r.error]
            body.append([r.vision, r.text, r.align, r.pool, *accs])
        widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
        rule = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule, *map(fmt, body)])


def _sort_key(row: AblationRow):
    # failures sink to the bottom; ties keep grid order (sort is stable)
    return -row.test_acc if row.ok and not math.isnan(row.test_acc) else math.inf


def ablate(
    grid: Sequence[ModelConfig],
    train_cfg: TrainConfig,
    instances: Sequence[PuzzleInstance],
    split: SplitSpec,
) -> AblationReport:
    """Train and test every configuration on the same split and data order.

    A configuration that raises is recorded with NaN accuracies and its
    error message; the remaining configurations still run.
    """
    if not grid:
        raise InputError("ablation grid is empty")
    test_set = split.select(instances, "test")
    rows = []
    for cfg in grid:
        vision, text, align, pool = cfg.variant_names
        try:
            result = train(cfg, train_cfg, instances, split)
            test_acc = evaluate(result.model, test_set) if test_set else float("nan")
            row = AblationRow(vision, text, align, pool, result.best_val_accuracy, test_acc, cfg.head)
        except (MMFuseError, ValueError, ArithmeticError) as exc:
            log.warning("config %s failed: %s", cfg.variant_names, exc)
            row = AblationRow(vision, text, align, pool, math.nan, math.nan, cfg.head, f"{type(exc).__name__}: {exc}")
        log.info("%s  val %.4f  test %.4f", cfg.variant_names, row.val_acc, row.test_acc)
        rows.append(row)
    return AblationReport(tuple(sorted(rows, key=_sort_key)))
