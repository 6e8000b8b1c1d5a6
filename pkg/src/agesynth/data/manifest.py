"""CSV dataset manifests.

Columns: ``subject_id, path, age, health, split`` plus an optional
``exclude`` flag (1 drops the row, e.g. for badly registered volumes).
Relative paths resolve against the manifest's own directory.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

from ..conditioning import MAX_AGE, Health

COLUMNS = ("subject_id", "path", "age", "health", "split")
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectMeta:
    subject_id: str
    age: float
    health: Health

    def __post_init__(self) -> None:
        if not 0 <= self.age <= MAX_AGE:
            raise ManifestError(f"{self.subject_id}: age {self.age} outside [0, {MAX_AGE}]")
        object.__setattr__(self, "health", Health.parse(self.health))


@dataclass(frozen=True)
class ManifestRow:
    meta: SubjectMeta
    path: str
    split: str = "train"
    exclude: bool = False

    @property
    def subject_id(self) -> str:
        return self.meta.subject_id


class DatasetManifest:
    def __init__(self, rows, root: str | os.PathLike = ".") -> None:
        self.rows: list[ManifestRow] = list(rows)
        self.root = Path(root)
        self.validate()

    def validate(self) -> None:
        seen: dict[str, float] = {}
        for row in self.rows:
            if row.split not in SPLITS:
                raise ManifestError(f"{row.subject_id}: unknown split {row.split!r}")
            if row.split != "train" or row.exclude:
                continue
            # cross-sectional training: one acquisition per subject
            if row.subject_id in seen:
                kind = "duplicate (subject, age)" if seen[row.subject_id] == row.meta.age else "repeated subject"
                raise ManifestError(f"{kind} row for {row.subject_id!r} in the training split")
            seen[row.subject_id] = row.meta.age

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def active(self, split: str | None = None) -> list[ManifestRow]:
        return [r for r in self.rows if not r.exclude and (split is None or r.split == split)]

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise ManifestError(f"cannot open manifest {path}: {exc}") from exc
        with fh:
            reader = csv.DictReader(fh)
            missing = set(COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ManifestError(f"{path}: missing columns {sorted(missing)}")
            rows = []
            for n, rec in enumerate(reader, start=2):
                try:
                    meta = SubjectMeta(rec["subject_id"], float(rec["age"]), rec["health"])
                except ValueError as exc:
                    raise ManifestError(f"{path}:{n}: {exc}") from exc
                exclude = str(rec.get("exclude") or "0").strip().lower() in ("1", "true", "yes")
                rows.append(ManifestRow(meta, rec["path"], rec["split"].strip(), exclude))
        return cls(rows, root=path.parent)

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow((*COLUMNS, "exclude"))
            for r in self.rows:
                w.writerow((r.subject_id, r.path, _fmt_age(r.meta.age), r.meta.health.value, r.split, int(r.exclude)))
        return path


def _fmt_age(age: float) -> str:
    return str(int(age)) if float(age).is_integer() else repr(float(age))
