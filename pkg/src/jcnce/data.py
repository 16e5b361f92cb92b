"""Task datasets, source-model predictions, and their on-disk formats.

A task is a set of feature vectors with integer class labels. Features are
stored on disk as row-major little-endian float32 (embeddings rarely carry
more precision) and widened to float64 in memory, where all computation
happens. Labels are stored as little-endian uint32.

Bundle layout::

    <dir>/manifest.json     keys: name, num_samples, dim, num_classes,
                            dtype="f32", byte_order="little",
                            files.features, files.labels,
                            optional files.predictions and num_pred_classes
    <dir>/features.bin      float32 LE, num_samples x dim, row-major
    <dir>/labels.bin        uint32 LE, num_samples
    <dir>/preds.bin         float32 LE, num_samples x num_pred_classes

``num_pred_classes`` covers the case where the prediction table is produced
by a source model whose label set differs from the bundle's own labels; it
defaults to ``num_classes`` when absent.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, LoadError, ValidationError

MANIFEST_NAME = "manifest.json"

_F32_EPS = float(np.finfo(np.float32).eps)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TaskDataset:
    """n feature vectors with integer labels; the empirical measure of a task.

    Invariants are enforced at construction: features finite, labels in
    ``[0, num_classes)`` with every class populated, n >= 1, d >= 1.
    Arrays are stored read-only; instances are safe to share across threads.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "task"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labs = np.asarray(self.labels)
        if feats.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {feats.shape}")
        n, d = feats.shape
        if n < 1 or d < 1:
            raise ValidationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if not np.isfinite(feats).all():
            bad = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0])
            raise ValidationError(f"non-finite feature value in row {bad}")
        if labs.ndim != 1 or labs.shape[0] != n:
            raise ValidationError(
                f"labels must be a length-{n} vector, got shape {labs.shape}"
            )
        if not np.issubdtype(labs.dtype, np.integer):
            if not np.all(labs == labs.astype(np.int64)):
                raise ValidationError("labels must be integers")
        labs = labs.astype(np.int64)
        k = int(self.num_classes)
        if k < 1:
            raise ValidationError(f"num_classes must be >= 1, got {k}")
        if labs.min() < 0:
            bad = int(np.flatnonzero(labs < 0)[0])
            raise ValidationError(f"negative label at index {bad}")
        if labs.max() >= k:
            bad = int(np.flatnonzero(labs >= k)[0])
            raise ValidationError(
                f"label {int(labs[bad])} at index {bad} >= num_classes {k}"
            )
        counts = np.bincount(labs, minlength=k)
        if (counts == 0).any():
            missing = int(np.flatnonzero(counts == 0)[0])
            raise ValidationError(
                f"class {missing} declared by num_classes={k} has no samples"
            )
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labs))
        object.__setattr__(self, "num_classes", k)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SourcePredictions:
    """Per-sample probability rows over a source label set.

    Each row must be a probability distribution (nonnegative, summing to 1
    within 1e-6).
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValidationError(f"probs must be a non-empty 2-D matrix, got {p.shape}")
        if not np.isfinite(p).all():
            raise ValidationError("non-finite prediction value")
        if (p < 0).any():
            i, j = np.argwhere(p < 0)[0]
            raise ValidationError(f"negative probability at ({i}, {j})")
        sums = p.sum(axis=1)
        worst = int(np.argmax(np.abs(sums - 1.0)))
        if abs(sums[worst] - 1.0) > 1e-6:
            raise ValidationError(
                f"prediction row {worst} sums to {sums[worst]:.8f}, expected 1"
            )
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def num_source_classes(self) -> int:
        return self.probs.shape[1]

    def pseudo_labels(self) -> np.ndarray:
        """Hard labels via row-wise argmax; ties resolve to the lowest index."""
        return np.argmax(self.probs, axis=1).astype(np.int64)


@dataclass(frozen=True)
class BundleManifest:
    name: str
    num_samples: int
    dim: int
    num_classes: int
    features_file: str = "features.bin"
    labels_file: str = "labels.bin"
    predictions_file: str | None = None
    num_pred_classes: int | None = None
    dtype: str = "f32"
    byte_order: str = "little"

    def to_json(self) -> str:
        files: dict[str, str] = {
            "features": self.features_file,
            "labels": self.labels_file,
        }
        if self.predictions_file is not None:
            files["predictions"] = self.predictions_file
        doc: dict = {
            "name": self.name,
            "num_samples": self.num_samples,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "dtype": self.dtype,
            "byte_order": self.byte_order,
            "files": files,
        }
        if self.num_pred_classes is not None:
            doc["num_pred_classes"] = self.num_pred_classes
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "BundleManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        try:
            files = doc["files"]
            manifest = BundleManifest(
                name=str(doc["name"]),
                num_samples=int(doc["num_samples"]),
                dim=int(doc["dim"]),
                num_classes=int(doc["num_classes"]),
                features_file=str(files["features"]),
                labels_file=str(files["labels"]),
                predictions_file=(
                    str(files["predictions"]) if "predictions" in files else None
                ),
                num_pred_classes=(
                    int(doc["num_pred_classes"]) if "num_pred_classes" in doc else None
                ),
                dtype=str(doc.get("dtype", "f32")),
                byte_order=str(doc.get("byte_order", "little")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"manifest missing or malformed field: {exc}") from exc
        if manifest.dtype != "f32":
            raise FormatError(f"unsupported dtype tag {manifest.dtype!r}, expected 'f32'")
        if manifest.byte_order != "little":
            raise FormatError(
                f"unsupported byte_order tag {manifest.byte_order!r}, expected 'little'"
            )
        return manifest


def _read_exact(path: str, expected_bytes: int) -> bytes:
    if not os.path.exists(path):
        raise LoadError(f"missing file: {path}")
    actual = os.path.getsize(path)
    if actual != expected_bytes:
        raise FormatError(
            f"{path}: expected {expected_bytes} bytes, found {actual}"
        )
    with open(path, "rb") as fh:
        return fh.read()


def load_bundle(path: str) -> tuple[TaskDataset, SourcePredictions | None]:
    """Load a bundle directory; validates every invariant before returning.

    Raises ``LoadError`` for missing files, ``FormatError`` for byte-length
    or manifest mismatches, and ``ValidationError`` for invariant breaks.
    """
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise LoadError(f"missing file: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = BundleManifest.from_json(fh.read())

    n, d, k = manifest.num_samples, manifest.dim, manifest.num_classes
    raw = _read_exact(os.path.join(path, manifest.features_file), n * d * 4)
    features = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    raw = _read_exact(os.path.join(path, manifest.labels_file), n * 4)
    labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    dataset = TaskDataset(features, labels, k, name=manifest.name)

    preds = None
    if manifest.predictions_file is not None:
        kp = manifest.num_pred_classes or k
        raw = _read_exact(os.path.join(path, manifest.predictions_file), n * kp * 4)
        table = np.frombuffer(raw, dtype="<f4").reshape(n, kp).astype(np.float64)
        # f32 quantization perturbs row sums by up to ~kp*eps32; check against
        # a quantization-aware budget, then renormalize so the type invariant
        # (1e-6) holds exactly.
        sums = table.sum(axis=1)
        budget = max(1e-6, 8.0 * kp * _F32_EPS)
        worst = int(np.argmax(np.abs(sums - 1.0)))
        if abs(sums[worst] - 1.0) > budget:
            raise ValidationError(
                f"prediction row {worst} sums to {sums[worst]:.8f}, expected 1"
            )
        preds = SourcePredictions(table / sums[:, None])
    return dataset, preds


def save_bundle(
    dataset: TaskDataset,
    preds: SourcePredictions | None,
    path: str,
) -> None:
    """Write a bundle directory; loading it back reproduces the dataset with
    features equal after the f64->f32->f64 round-trip."""
    if preds is not None and preds.n != dataset.n:
        raise ValidationError(
            f"predictions have {preds.n} rows but dataset has {dataset.n}"
        )
    os.makedirs(path, exist_ok=True)
    manifest = BundleManifest(
        name=dataset.name,
        num_samples=dataset.n,
        dim=dataset.dim,
        num_classes=dataset.num_classes,
        predictions_file="preds.bin" if preds is not None else None,
        num_pred_classes=preds.num_source_classes if preds is not None else None,
    )
    try:
        with open(os.path.join(path, manifest.features_file), "wb") as fh:
            fh.write(dataset.features.astype("<f4").tobytes())
        with open(os.path.join(path, manifest.labels_file), "wb") as fh:
            fh.write(dataset.labels.astype("<u4").tobytes())
        if preds is not None:
            with open(os.path.join(path, manifest.predictions_file), "wb") as fh:
                fh.write(preds.probs.astype("<f4").tobytes())
        with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            fh.write(manifest.to_json())
    except OSError as exc:
        raise LoadError(f"failed to write bundle under {path}: {exc}") from exc


def load_csv(path: str, name: str | None = None) -> TaskDataset:
    """Load the convenience CSV format: header ``label,f0,...,f{d-1}``.

    The class count is inferred as ``max(label) + 1``.
    """
    if not os.path.exists(path):
        raise LoadError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = [cell.strip() for cell in lines[0].split(",")]
    d = len(header) - 1
    expected = ["label"] + [f"f{i}" for i in range(d)]
    if d < 1 or header != expected:
        raise FormatError(
            f"{path}: line 1: header must be 'label,f0,...,f{{d-1}}', got {lines[0]!r}"
        )
    labels: list[int] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 1:
            raise FormatError(
                f"{path}: line {lineno}: expected {d + 1} fields, got {len(cells)}"
            )
        try:
            lab = int(cells[0])
            row = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from exc
        labels.append(lab)
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    labs = np.asarray(labels, dtype=np.int64)
    if labs.min() < 0:
        raise FormatError(f"{path}: negative label {int(labs.min())}")
    return TaskDataset(
        np.asarray(rows, dtype=np.float64),
        labs,
        int(labs.max()) + 1,
        name=name or os.path.splitext(os.path.basename(path))[0],
    )


def _stratified_counts(class_sizes: np.ndarray, max_n: int) -> np.ndarray:
    """Largest-remainder apportionment with a one-sample floor per class."""
    total = int(class_sizes.sum())
    quota = class_sizes * (max_n / total)
    counts = np.floor(quota).astype(np.int64)
    frac = quota - counts
    short = max_n - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(frac)), -frac))
        counts[order[:short]] += 1
    # never drop a present class: rebalance from the largest classes
    while (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        donor = int(np.argmax(counts))
        counts[empty] += 1
        counts[donor] -= 1
    return counts


def subsample(dataset: TaskDataset, max_n: int, seed: int) -> TaskDataset:
    """Class-stratified subsample of at most ``max_n`` points.

    Per-class counts stay proportional to the originals within +/-1 while
    keeping at least one sample per class. Deterministic for a fixed seed;
    returns the input object unchanged when it is already small enough.
    """
    if max_n < dataset.num_classes:
        raise ValueError(
            f"max_n={max_n} is smaller than the {dataset.num_classes} present classes"
        )
    if dataset.n <= max_n:
        return dataset
    counts = _stratified_counts(dataset.class_counts(), max_n)
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        take = int(counts[c])
        keep.append(rng.choice(idx, size=take, replace=False) if take < idx.size else idx)
    order = np.sort(np.concatenate(keep))
    return TaskDataset(
        dataset.features[order],
        dataset.labels[order],
        dataset.num_classes,
        name=dataset.name,
    )
