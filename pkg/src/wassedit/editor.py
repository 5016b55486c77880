"""Affine latent edits ``z' = z + alpha * (W z + b)`` and their JSON model files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import DataError

__all__ = ["AffineEditor", "edit", "init_editor", "save_editor", "load_editor"]

FORMAT_VERSION = 1


@dataclass
class AffineEditor:
    weight: np.ndarray
    bias: np.ndarray
    attribute_name: str = ""
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        dim = self.bias.shape[0]
        if self.weight.shape != (dim, dim):
            raise ValueError(f"weight shape {self.weight.shape} does not match bias length {dim}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("editor parameters must be finite")

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    def direction(self, codes) -> np.ndarray:
        """``H(z) = W z + b`` for each row."""
        codes = np.asarray(codes, dtype=float)
        return codes @ self.weight.T + self.bias

    def copy(self) -> AffineEditor:
        return AffineEditor(self.weight.copy(), self.bias.copy(), self.attribute_name,
                            dict(self.training_meta))


def edit(editor: AffineEditor, codes, alpha: float) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    squeeze = codes.ndim == 1
    codes = np.atleast_2d(codes)
    if codes.shape[1] != editor.dim:
        raise ValueError(f"codes have dim {codes.shape[1]}, editor has dim {editor.dim}")
    out = codes + alpha * editor.direction(codes) if alpha != 0 else codes.copy()
    return out[0] if squeeze else out


def init_editor(dim: int, seed: int = 0, attribute_name: str = "") -> AffineEditor:
    """Near-identity editor: weight ~ N(0, (0.01 / sqrt(dim))^2), zero bias."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng([seed, 3])
    weight = rng.normal(0.0, 0.01 / np.sqrt(dim), size=(dim, dim))
    return AffineEditor(weight, np.zeros(dim), attribute_name)


def save_editor(editor: AffineEditor, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "attribute_name": editor.attribute_name,
        "dim": editor.dim,
        "weight": editor.weight.reshape(-1).tolist(),
        "bias": editor.bias.tolist(),
        "training_meta": editor.training_meta,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_editor(path) -> AffineEditor:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        if doc["format_version"] != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format_version {doc['format_version']}")
        dim = int(doc["dim"])
        weight = np.array(doc["weight"], dtype=float).reshape(dim, dim)
        return AffineEditor(weight, doc["bias"], doc.get("attribute_name", ""),
                            doc.get("training_meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed editor file ({exc})") from exc
