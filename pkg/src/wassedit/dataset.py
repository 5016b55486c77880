"""Latent datasets and their on-disk formats (LOTD binary, CSV)."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["LatentDataset", "DataError", "save_lotd", "load_lotd", "save_csv", "load_csv"]

MAGIC = b"LOTD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class LatentDataset:
    codes: np.ndarray
    labels: np.ndarray
    identity: np.ndarray | None = None
    attribute_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=float)
        labels = np.asarray(self.labels)
        if codes.ndim != 2:
            raise DataError(f"codes must be 2-D, got shape {codes.shape}")
        if labels.ndim == 1:
            labels = labels[:, None]
        if labels.shape[0] != codes.shape[0]:
            raise DataError(f"{labels.shape[0]} label rows for {codes.shape[0]} codes")
        if codes.shape[0] < 2:
            raise DataError("a dataset needs at least 2 samples")
        if not np.all(np.isfinite(codes)):
            raise DataError("codes contain NaN or Inf")
        if not np.all((labels == 0) | (labels == 1)):
            raise DataError("labels must be 0 or 1")
        labels = labels.astype(np.uint8)
        if self.identity is not None:
            identity = np.asarray(self.identity, dtype=float)
            if identity.ndim != 2 or identity.shape[0] != codes.shape[0]:
                raise DataError("identity must have one row per code")
            self.identity = identity
        names = list(self.attribute_names) or [f"attr{k}" for k in range(labels.shape[1])]
        if len(names) != labels.shape[1]:
            raise DataError(f"{len(names)} attribute names for {labels.shape[1]} label columns")
        self.codes, self.labels, self.attribute_names = codes, labels, names

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @property
    def K(self) -> int:
        return self.labels.shape[1]

    def check_attributes(self) -> None:
        """Every attribute must have at least one positive and one negative sample."""
        pos = self.labels.sum(axis=0)
        for k, name in enumerate(self.attribute_names):
            if pos[k] == 0 or pos[k] == self.n:
                raise DataError(f"attribute {name!r} has a single label value")

    def attribute_index(self, attribute) -> int:
        if isinstance(attribute, (int, np.integer)):
            k = int(attribute)
        elif isinstance(attribute, str) and attribute in self.attribute_names:
            k = self.attribute_names.index(attribute)
        elif isinstance(attribute, str) and attribute.lstrip("-").isdigit():
            k = int(attribute)
        else:
            raise DataError(f"unknown attribute {attribute!r}")
        if not 0 <= k < self.K:
            raise DataError(f"attribute index {k} out of range for K={self.K}")
        return k

    def subset(self, rows) -> LatentDataset:
        rows = np.asarray(rows)
        return LatentDataset(
            self.codes[rows],
            self.labels[rows],
            None if self.identity is None else self.identity[rows],
            list(self.attribute_names),
            dict(self.meta),
        )


def save_lotd(data: LatentDataset, path) -> None:
    identity = data.identity if data.identity is not None else np.zeros((data.n, 0))
    trailer = json.dumps(
        {"attribute_names": data.attribute_names, "spec": data.meta.get("spec")},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, data.n, data.dim, data.K, identity.shape[1]))
        fh.write(np.ascontiguousarray(data.codes, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(identity, dtype="<f4").tobytes())
        fh.write(trailer)


def load_lotd(path) -> LatentDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: file too short for a LOTD header")
    magic, version, n, dim, K, id_dim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    offset = _HEADER.size
    sizes = (n * dim * 4, n * K, n * id_dim * 4)
    if len(raw) < offset + sum(sizes):
        raise DataError(f"{path}: truncated payload")
    codes = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim)
    offset += sizes[0]
    labels = np.frombuffer(raw, dtype=np.uint8, count=n * K, offset=offset).reshape(n, K)
    offset += sizes[1]
    identity = np.frombuffer(raw, dtype="<f4", count=n * id_dim, offset=offset).reshape(n, id_dim)
    offset += sizes[2]
    try:
        trailer = json.loads(raw[offset:].decode("utf-8")) if offset < len(raw) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable JSON trailer ({exc})") from exc
    return LatentDataset(
        codes.astype(float),
        labels.copy(),
        identity.astype(float) if id_dim else None,
        trailer.get("attribute_names") or [],
        {"spec": trailer.get("spec")},
    )


def save_csv(data: LatentDataset, path) -> None:
    header = [f"z{j}" for j in range(data.dim)]
    header += [f"attr_{name}" for name in data.attribute_names]
    id_dim = 0 if data.identity is None else data.identity.shape[1]
    header += [f"id{j}" for j in range(id_dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.codes[i]]
            row += [str(int(v)) for v in data.labels[i]]
            if id_dim:
                row += [repr(float(v)) for v in data.identity[i]]
            writer.writerow(row)


def load_csv(path) -> LatentDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    attr_cols = [j for j, h in enumerate(header) if h.startswith("attr_")]
    id_cols = [j for j, h in enumerate(header) if h.startswith("id")]
    code_cols = [j for j in range(len(header)) if j not in attr_cols and j not in id_cols]
    if not attr_cols:
        raise DataError(f"{path}: no label columns (prefix 'attr_')")
    try:
        table = np.array([[float(v) for v in row] for row in body])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    if table.ndim != 2 or table.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    return LatentDataset(
        table[:, code_cols],
        table[:, attr_cols],
        table[:, id_cols] if id_cols else None,
        [header[j][len("attr_"):] for j in attr_cols],
    )
