"""FeatureTable: the CSV interchange format ``patient_id,label,<features...>``."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class TableFormatError(ValueError):
    pass


def format_real(value: float) -> str:
    """Shortest round-trip decimal; NaN becomes the empty (missing) cell."""
    value = float(value)
    if np.isnan(value):
        return ""
    return repr(value)


@dataclass
class FeatureTable:
    column_names: list[str]
    patient_ids: list[str]
    labels: np.ndarray  # int8, 0/1
    X: np.ndarray  # float64 (n_rows, n_cols); NaN marks missing

    def __post_init__(self):
        self.column_names = list(self.column_names)
        self.patient_ids = [str(p) for p in self.patient_ids]
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.patient_ids), len(self.column_names))
        if len(set(self.column_names)) != len(self.column_names):
            raise TableFormatError("column names must be unique")
        if self.labels.shape != (len(self.patient_ids),):
            raise TableFormatError("one label per row required")
        if not np.isin(self.labels, (0, 1)).all():
            raise TableFormatError("labels must be 0 or 1")

    @property
    def n_rows(self) -> int:
        return len(self.patient_ids)

    def rows(self, idx) -> FeatureTable:
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureTable(self.column_names, [self.patient_ids[i] for i in idx], self.labels[idx], self.X[idx])

    def select(self, columns) -> FeatureTable:
        columns = list(columns)
        pos = {c: i for i, c in enumerate(self.column_names)}
        missing = [c for c in columns if c not in pos]
        if missing:
            raise KeyError(f"unknown columns: {missing[:5]}")
        return FeatureTable(columns, self.patient_ids, self.labels, self.X[:, [pos[c] for c in columns]])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patient_id", "label", *self.column_names])
        for pid, label, row in zip(self.patient_ids, self.labels, self.X):
            writer.writerow([pid, int(label), *(format_real(v) for v in row)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        write_text_atomic(path, self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> FeatureTable:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration as exc:
                raise TableFormatError(f"{path}: empty file") from exc
            if header[:2] != ["patient_id", "label"]:
                raise TableFormatError(f"{path}: header must start with patient_id,label")
            columns = header[2:]
            ids, labels, values = [], [], []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise TableFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
                ids.append(row[0])
                try:
                    labels.append(int(row[1]))
                    values.append([float(c) if c != "" else np.nan for c in row[2:]])
                except ValueError as exc:
                    raise TableFormatError(f"{path}:{lineno}: {exc}") from exc
        X = np.array(values, dtype=np.float64).reshape(len(ids), len(columns))
        return cls(columns, ids, np.array(labels), X)


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
