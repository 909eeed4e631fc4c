"""Error rates, peer diversity and CSV reports."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRECISION = 6


def top1_error(predictions: np.ndarray, labels) -> float:
    """Percentage of rows whose argmax misses the label (ties go to the lowest index)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) < 1:
        raise ValueError("top1_error needs at least one sample")
    return float(100.0 * np.mean(predictions.argmax(axis=1) != labels))


def ensemble_error(peer_predictions: np.ndarray, labels) -> float:
    """Top-1 error of the arithmetic mean of the peers' probability predictions."""
    peer_predictions = np.asarray(peer_predictions)
    if peer_predictions.shape[0] < 1:
        raise ValueError("ensemble_error needs at least one peer")
    return top1_error(peer_predictions.mean(axis=0), labels)


def peer_diversity(peer_predictions: np.ndarray) -> float:
    """Mean Euclidean distance between predictions of every unordered pair of peers, averaged over samples."""
    p = np.asarray(peer_predictions)
    if p.shape[0] < 2:
        raise ValueError("peer_diversity needs at least two peers")
    dists = [np.linalg.norm(p[a] - p[b], axis=-1).mean() for a, b in itertools.combinations(range(p.shape[0]), 2)]
    return float(np.mean(dists))


@dataclass
class ExperimentReport:
    header: dict
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def add_row(self, row: dict) -> None:
        """Append a row; floats are stored at the CSV precision so a written report parses back exactly."""
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"report row lacks columns {sorted(missing)}")
        self.rows.append({c: _store(row[c]) for c in self.columns})

    @property
    def final(self) -> dict:
        return self.rows[-1]


def report_columns(m: int) -> list[str]:
    cols = ["epoch", "lr", "rampup", "loss_total"]
    cols += [f"ce_{a}" for a in range(m)]
    cols += ["dis1", "dis2", "kd"]
    cols += [f"err_{a}" for a in range(m)]
    cols += ["leader_error", "reported_error", "ensemble_error", "diversity"]
    return cols


def _store(value):
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    return round(float(value), PRECISION)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.{PRECISION}f}"


def csv_text(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(report.columns)
    for row in report.rows:
        writer.writerow([_fmt(row[c]) for c in report.columns])
    return buf.getvalue()


def header_text(report: ExperimentReport) -> str:
    return json.dumps(report.header, indent=2, sort_keys=True, default=str) + "\n"


def emit_csv(report: ExperimentReport, path: str | Path) -> Path:
    """Write the report CSV and a ``<name>.config.txt`` sidecar echoing the header."""
    path = Path(path)
    sidecar = path.with_name(path.stem + ".config.txt")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(csv_text(report))
        sidecar.write_text(header_text(report))
    except OSError as exc:
        raise OSError(f"could not write report to {path}: {exc}") from exc
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [{c: float(v) for c, v in zip(columns, line)} for line in reader]
    return columns, rows
