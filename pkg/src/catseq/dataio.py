"""Shared on-disk formats: per-event vectors and per-event labels.

Both formats carry (patient_id, position) provenance so that outputs of
different stages can be joined without the original dataset at hand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["EncodedEvents", "LabelAssignment", "NOISE_LABEL"]

NOISE_LABEL = -1


@dataclass
class EncodedEvents:
    """One representation vector per covered event."""

    patient_ids: list[str]
    positions: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        n = len(self.patient_ids)
        if len(self.positions) != n or len(self.vectors) != n:
            raise ValueError("provenance and vectors must have equal lengths")

    def __len__(self) -> int:
        return len(self.patient_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id", "position"] + [f"v{i}" for i in range(self.dim)])
            for pid, pos, vec in zip(self.patient_ids, self.positions, self.vectors):
                writer.writerow([pid, int(pos)] + [repr(float(v)) for v in vec])

    @classmethod
    def load_csv(cls, path: str | Path) -> "EncodedEvents":
        pids: list[str] = []
        positions: list[int] = []
        rows: list[list[float]] = []
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["patient_id", "position"]:
                raise ValueError(f"unexpected header in {path}: {header[:2]}")
            for row in reader:
                pids.append(row[0])
                positions.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
        return cls(pids, np.asarray(positions, dtype=np.int64),
                   np.asarray(rows, dtype=np.float64))


@dataclass
class LabelAssignment:
    """Per-event integer labels; -1 is reserved for noise."""

    patient_ids: list[str]
    positions: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.patient_ids)
        if len(self.positions) != n or len(self.labels) != n:
            raise ValueError("provenance and labels must have equal lengths")

    def __len__(self) -> int:
        return len(self.patient_ids)

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id", "position", "label"])
            for pid, pos, lab in zip(self.patient_ids, self.positions, self.labels):
                writer.writerow([pid, int(pos), int(lab)])

    @classmethod
    def load_csv(cls, path: str | Path) -> "LabelAssignment":
        pids: list[str] = []
        positions: list[int] = []
        labels: list[int] = []
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["patient_id", "position", "label"]:
                raise ValueError(f"unexpected header in {path}: {header}")
            for row in reader:
                pids.append(row[0])
                positions.append(int(row[1]))
                labels.append(int(row[2]))
        return cls(pids, np.asarray(positions, dtype=np.int64),
                   np.asarray(labels, dtype=np.int64))
