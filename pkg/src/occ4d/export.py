from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

TOKENIZER_LOSS_HEADER = ("step", "recon", "codebook", "commit", "total")
DIFFUSION_LOSS_HEADER = ("step", "stage", "l_simple", "l_vlb", "total")


class LossLog:
    """
    Appends loss records (anything with ``as_row()``) to a CSV file.

    With ``resume_from`` set, rows at or after that step are dropped first so a
    resumed run continues the curve without duplicates.
    """

    def __init__(self, path: Path, header: Iterable[str], resume_from: int | None = None):
        self.path = Path(path)
        self.header = tuple(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_from is not None and self.path.exists():
            kept = [row for row in read_loss_csv(self.path) if int(row["step"]) < resume_from]
            logger.info(f"Resuming {self.path.name}: kept {len(kept)} rows before step {resume_from}")
        with self.path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=self.header, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(kept)

    def append(self, record) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(record.as_row())


def read_loss_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_metrics_report(report: dict, output_file: Path) -> Path:
    """
    Exports evaluation results as JSON.
    """
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    output_file.write_text(json.dumps(report, indent=4, ensure_ascii=False), encoding="utf-8")
    logger.info(f"Wrote metrics report {output_file}")
    return output_file


def write_rows(rows: list[dict], output_file: Path) -> Path:
    """Writes a list of flat dicts as CSV, columns in first-row order."""
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    with output_file.open("w", newline="", encoding="utf-8") as f:
        if rows:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return output_file
