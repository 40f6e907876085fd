"""ChestX-ray8 index parsing, case selection, stratified splits and batching."""
from __future__ import annotations

import csv
import io
import os
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import (EmptyClassError, MissingDataError, RowError, SchemaError,
                     StratificationError, ConfigError)

POSITIVE = "positive"
NEGATIVE = "negative"

IMAGE_COLUMNS = ("Image Index", "image_id", "Image_Index", "image")
LABEL_COLUMNS = ("Finding Labels", "labels", "Finding_Labels", "finding_labels")

MANIFEST_COLUMNS = ("image_id", "class", "split", "tensor_blob_path", "image_path")

# positive count of the published Cardiomegaly extraction from the official index
REFERENCE_POSITIVE_COUNT = 1010


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    labels: frozenset
    path: str
    cls: Optional[str] = None
    blob_path: Optional[str] = None

    @property
    def is_positive(self):
        return self.cls == POSITIVE


@dataclass
class DatasetSplit:
    train: list
    val: list
    seed: int
    ratio: float


def _find_column(header, candidates, what):
    for name in candidates:
        if name in header:
            return name
    raise SchemaError(f"missing {what} column (looked for {list(candidates)}); found headers {header}")


def parse_index(text, image_dir=""):
    """Parse index CSV text into :class:`ImageRecord`s (labels split on ``|``)."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("index CSV is empty; found headers []") from None
    img_col = header.index(_find_column(header, IMAGE_COLUMNS, "image file name"))
    lab_col = header.index(_find_column(header, LABEL_COLUMNS, "finding label"))
    records, seen = [], set()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(img_col, lab_col):
            raise RowError(f"expected at least {max(img_col, lab_col) + 1} fields, got {len(row)}", line)
        image_id = row[img_col].strip()
        if not image_id:
            raise RowError("empty image file name", line)
        if image_id in seen:
            raise RowError(f"duplicate image id {image_id!r}", line)
        seen.add(image_id)
        labels = frozenset(s.strip() for s in row[lab_col].split("|") if s.strip())
        records.append(ImageRecord(image_id, labels, os.path.join(image_dir, image_id)))
    return records


def parse_index_csv(path, image_dir=""):
    with open(path, encoding="utf-8-sig", newline="") as fh:
        text = fh.read()
    try:
        return parse_index(text, image_dir)
    except RowError as exc:
        raise RowError(exc.message, exc.line, path) from None


def matches(labels, label, rule):
    if rule == "exclusive":
        return labels == {label}
    if rule == "any":
        return label in labels
    raise ConfigError(f"unknown selection rule {rule!r} (use 'exclusive' or 'any')")


def count_positives(records, positive_label="Cardiomegaly", rule="exclusive"):
    return sum(matches(r.labels, positive_label, rule) for r in records)


def select_cases(records, positive_label="Cardiomegaly", negative_label="No Finding",
                 rule="exclusive", seed=0):
    """Positives by ``rule``; an equal-size seeded sample of ``negative_label`` records.

    Returns positives (in index order) followed by the sampled negatives (also
    in index order), each with ``cls`` assigned.
    """
    positives = [replace(r, cls=POSITIVE) for r in records if matches(r.labels, positive_label, rule)]
    pool = [r for r in records
            if matches(r.labels, negative_label, "exclusive") and not matches(r.labels, positive_label, rule)]
    if not positives:
        raise EmptyClassError(f"no records match positive label {positive_label!r} under rule {rule!r}")
    if not pool:
        raise EmptyClassError(f"no records carry negative label {negative_label!r}")
    k = min(len(positives), len(pool))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pool), size=k, replace=False))
    negatives = [replace(pool[i], cls=NEGATIVE) for i in chosen]
    return positives + negatives


def split(records, ratio=0.8, seed=0):
    """Stratified shuffle-split; each class contributes ``round((1-ratio)*n)`` to validation (at least 1)."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for r in records:
        by_class.setdefault(r.cls, []).append(r)
    train, val = [], []
    for cls in sorted(by_class, key=str):
        group = by_class[cls]
        if len(group) < 2:
            raise StratificationError(f"class {cls!r} has {len(group)} record(s); need at least 2")
        order = rng.permutation(len(group))
        n_val = min(len(group) - 1, max(1, int(round((1 - ratio) * len(group)))))
        val += [group[i] for i in order[:n_val]]
        train += [group[i] for i in order[n_val:]]
    return DatasetSplit(train, val, seed, ratio)


def epoch_order(n, seed, epoch):
    """Permutation of ``range(n)`` determined by ``(seed, epoch)`` alone."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(records, tensors: Mapping, batch_size=32, seed=0, epoch=0, shuffle=True):
    """Yield ``(x, y, ids)`` with x of shape ``(B, 1, S, S)`` and y in {0., 1.}.

    ``tensors`` maps image_id to a ``(1, 1, S, S)`` array. The final partial
    batch is kept.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = epoch_order(len(records), seed, epoch) if shuffle else np.arange(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        xs = []
        for r in chunk:
            try:
                xs.append(np.asarray(tensors[r.image_id], dtype=np.float32))
            except KeyError:
                raise MissingDataError(r.image_id) from None
        x = np.concatenate([a.reshape((1,) + a.shape[-3:]) for a in xs], axis=0)
        y = np.array([1.0 if r.is_positive else 0.0 for r in chunk], dtype=np.float32)
        yield x, y, [r.image_id for r in chunk]


class BlobStore(Mapping):
    """Read-only mapping image_id -> tensor, loading preprocessed blobs on demand."""

    def __init__(self, records: Iterable[ImageRecord]):
        self._paths = {r.image_id: r.blob_path for r in records if r.blob_path}

    def __getitem__(self, image_id):
        from .checkpoint import read_tensor_blob

        path = self._paths.get(image_id)
        if path is None or not os.path.exists(path):
            raise KeyError(image_id)
        tensors, _ = read_tensor_blob(path)
        return tensors["image"]

    def __iter__(self) -> Iterator[str]:
        return iter(self._paths)

    def __len__(self):
        return len(self._paths)


# ------------------------------------------------------------------ manifest

def write_manifest(path, split_: DatasetSplit):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for part, recs in (("train", split_.train), ("val", split_.val)):
            for r in recs:
                w.writerow([r.image_id, r.cls, part, r.blob_path or "", r.path])


def read_manifest(path):
    """Return ``{"train": [...], "val": [...]}`` of records read from a manifest CSV."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        found = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS[:4] if c not in found]
        if missing:
            raise SchemaError(f"{path}: manifest lacks columns {missing}; found headers {found}")
        parts = {"train": [], "val": []}
        for row in reader:
            line = reader.line_num
            cls, part = row["class"], row["split"]
            if cls not in (POSITIVE, NEGATIVE):
                raise RowError(f"class must be positive|negative, got {cls!r}", line, path)
            if part not in parts:
                raise RowError(f"split must be train|val, got {part!r}", line, path)
            parts[part].append(ImageRecord(row["image_id"], frozenset(), row.get("image_path") or "",
                                           cls, row["tensor_blob_path"] or None))
    return parts


def class_counts(records):
    pos = sum(r.cls == POSITIVE for r in records)
    return {POSITIVE: pos, NEGATIVE: sum(r.cls == NEGATIVE for r in records)}
