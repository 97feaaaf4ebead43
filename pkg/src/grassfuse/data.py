"""Covariance features, synthetic sequence generation, and CSV manifests.

A sample is a sequence of T frames in R^n.  Its feature is the ridge-
stabilized sample covariance, which the network's normalization and
orthonormalization stages turn into a dictionary of subspace atoms.

Synthetic classes are planted subspaces: each class has a center basis on
G(n, d), each sample wobbles that center along a random tangent of scale
sigma and emits frames with standard normal coefficients plus a small
ambient noise floor, so class identity lives purely in the column space of
the covariance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch

from . import grassmann, linalg
from .config import SyntheticSpec
from .exceptions import (
    EmptyBatchError,
    InconsistentWidthError,
    LabelOutOfRangeError,
    ParseError,
    SeparationFailureError,
)

# Relative ridge added to every sample covariance; keeps the feature SPD
# without disturbing the dominant column space.
COVARIANCE_RIDGE = 1e-6
# Ambient per-coordinate noise on synthetic frames.  Small enough to leave
# the planted subspace dominant (coefficient variance 1 vs 0.01), large
# enough that covariances are well conditioned: a weaker floor makes the
# affine-metric barycenter needlessly stiff.
AMBIENT_NOISE = 0.1


def covariance_features(frames: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Sample covariance of a (T, n) sequence, symmetrized and ridge-floored.

    The ridge is relative, 1e-6 * (trace / n) * I.  A degenerate sequence
    whose covariance has (numerically) zero trace gets an absolute 1e-6 ridge
    instead and the returned flag is True.
    """
    if frames.ndim != 2:
        raise EmptyBatchError(
            f"covariance_features: expected (T, n) frames, got {tuple(frames.shape)}"
        )
    t, n = frames.shape
    if t < 2:
        raise EmptyBatchError("covariance_features: need at least 2 frames")
    x = linalg.as_matrix(frames)
    centered = x - x.mean(dim=0, keepdim=True)
    cov = centered.transpose(-1, -2) @ centered / (t - 1)
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    scale = float(torch.diagonal(cov).sum()) / n
    eye = torch.eye(n, dtype=cov.dtype)
    degenerate = scale <= 1e-300
    ridge = 1e-6 if degenerate else COVARIANCE_RIDGE * scale
    return cov + ridge * eye, degenerate


def covariance_batch(sequences: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """covariance_features over a (N, T, n) stack; flags per sample."""
    feats = []
    flags = []
    for i in range(sequences.shape[0]):
        f, d = covariance_features(sequences[i])
        feats.append(f)
        flags.append(d)
    return torch.stack(feats), torch.tensor(flags, dtype=torch.bool)


@dataclass
class Dataset:
    """Sequences plus their covariance features and integer labels."""

    sequences: torch.Tensor  # (N, T, n)
    features: torch.Tensor  # (N, n, n), SPD
    labels: torch.Tensor  # (N,), int64
    degenerate: torch.Tensor  # (N,), bool, absolute-ridge fallback used

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _separated_centers(
    spec: SyntheticSpec, generator: torch.Generator
) -> torch.Tensor:
    """Draw C class centers on G(n, d) with pairwise distance >= min_separation."""
    for _ in range(spec.max_redraws):
        centers = torch.stack(
            [
                grassmann.random_point(spec.n, spec.d, generator)
                for _ in range(spec.classes)
            ]
        )
        ok = True
        for i in range(spec.classes):
            for j in range(i + 1, spec.classes):
                if float(grassmann.projection_metric(centers[i], centers[j])) < spec.min_separation:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return centers
    raise SeparationFailureError(
        f"could not draw {spec.classes} subspaces on G({spec.n},{spec.d}) with pairwise "
        f"distance >= {spec.min_separation} in {spec.max_redraws} attempts"
    )


def _emit_split(
    centers: torch.Tensor, spec: SyntheticSpec, per_class: int, generator: torch.Generator
) -> Dataset:
    sequences = []
    labels = []
    for cls in range(spec.classes):
        for _ in range(per_class):
            delta = grassmann.random_tangent(centers[cls], spec.sigma, generator)
            basis = grassmann.exp_map(centers[cls], delta)
            coeffs = torch.randn(spec.frames, spec.d, dtype=linalg.DTYPE, generator=generator)
            noise = torch.randn(spec.frames, spec.n, dtype=linalg.DTYPE, generator=generator)
            sequences.append(coeffs @ basis.transpose(-1, -2) + AMBIENT_NOISE * noise)
            labels.append(cls)
    seq = torch.stack(sequences)
    lab = torch.tensor(labels, dtype=torch.int64)
    feats, degenerate = covariance_batch(seq)
    return Dataset(sequences=seq, features=feats, labels=lab, degenerate=degenerate)


def make_synthetic(
    spec: SyntheticSpec, seed: int
) -> tuple[Dataset, Dataset, torch.Tensor]:
    """Generate train and test splits from planted class subspaces.

    Deterministic in the seed: centers, tangents, coefficients, and noise are
    all drawn from one seeded generator in a fixed order.
    """
    generator = linalg.machine_seeded_generator(seed)
    centers = _separated_centers(spec, generator)
    train = _emit_split(centers, spec, spec.train_per_class, generator)
    test = _emit_split(centers, spec, spec.test_per_class, generator)
    return train, test, centers


# --- CSV manifests -------------------------------------------------------------
#
# A manifest is a CSV whose first row is `n,<width>` and whose remaining rows
# are `<relative sequence path>,<label>`.  Each sequence file holds one frame
# per row, width comma-separated values, printed with %.17g so float64 round
# trips exactly.


def export_manifest(dataset: Dataset, directory: str | Path, name: str) -> Path:
    directory = Path(directory)
    seq_dir = directory / f"{name}_sequences"
    seq_dir.mkdir(parents=True, exist_ok=True)
    n = dataset.sequences.shape[-1]
    manifest = directory / f"{name}_manifest.csv"
    with open(manifest, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["n", str(n)])
        for i in range(len(dataset)):
            rel = Path(f"{name}_sequences") / f"{name}_{i:05d}.csv"
            with open(directory / rel, "w", newline="") as seq_handle:
                seq_writer = csv.writer(seq_handle)
                for row in dataset.sequences[i].tolist():
                    seq_writer.writerow([f"{v:.17g}" for v in row])
            writer.writerow([rel.as_posix(), str(int(dataset.labels[i]))])
    return manifest


def _load_sequence(path: Path, expected_width: int) -> torch.Tensor:
    rows: list[list[float]] = []
    try:
        with open(path, newline="") as handle:
            for line_no, row in enumerate(csv.reader(handle), start=1):
                if not row:
                    continue
                if len(row) != expected_width:
                    raise InconsistentWidthError(
                        f"expected {expected_width} values per row, found {len(row)}",
                        path=str(path),
                        line=line_no,
                    )
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ParseError(
                        f"non-numeric value: {exc}", path=str(path), line=line_no
                    ) from exc
    except OSError as exc:
        raise ParseError(f"cannot read sequence file: {exc}", path=str(path)) from exc
    if len(rows) < 2:
        raise ParseError("sequence needs at least 2 frames", path=str(path))
    return torch.tensor(rows, dtype=linalg.DTYPE)


def load_manifest(path: str | Path, classes: int | None = None) -> Dataset:
    """Load a manifest written by export_manifest (or by hand to the same format).

    Sequence lengths may vary across files; covariances are computed per
    sequence, and the `sequences` field is padded with trailing zero frames
    only when lengths differ (features are computed before padding).
    """
    path = Path(path)
    try:
        with open(path, newline="") as handle:
            reader = list(csv.reader(handle))
    except OSError as exc:
        raise ParseError(f"cannot read manifest: {exc}", path=str(path)) from exc
    if not reader:
        raise ParseError("empty manifest", path=str(path), line=1)
    header = reader[0]
    if len(header) != 2 or header[0].strip() != "n":
        raise ParseError(
            "manifest header must be 'n,<width>'", path=str(path), line=1
        )
    try:
        width = int(header[1])
    except ValueError as exc:
        raise ParseError(f"bad width in header: {header[1]!r}", path=str(path), line=1) from exc
    if width < 1:
        raise ParseError(f"width must be positive, got {width}", path=str(path), line=1)
    sequences: list[torch.Tensor] = []
    labels: list[int] = []
    for line_no, row in enumerate(reader[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(
                f"manifest rows are '<path>,<label>', found {len(row)} fields",
                path=str(path),
                line=line_no,
            )
        rel, label_text = row
        try:
            label = int(label_text)
        except ValueError as exc:
            raise ParseError(
                f"bad label {label_text!r}", path=str(path), line=line_no
            ) from exc
        if label < 0 or (classes is not None and label >= classes):
            raise LabelOutOfRangeError(
                f"label {label} out of range at {path}:{line_no}"
            )
        sequences.append(_load_sequence(path.parent / rel, width))
        labels.append(label)
    if not sequences:
        raise ParseError("manifest lists no sequences", path=str(path))
    feats = []
    flags = []
    for seq in sequences:
        f, d = covariance_features(seq)
        feats.append(f)
        flags.append(d)
    max_t = max(int(s.shape[0]) for s in sequences)
    padded = torch.zeros(len(sequences), max_t, width, dtype=linalg.DTYPE)
    for i, seq in enumerate(sequences):
        padded[i, : seq.shape[0]] = seq
    return Dataset(
        sequences=padded,
        features=torch.stack(feats),
        labels=torch.tensor(labels, dtype=torch.int64),
        degenerate=torch.tensor(flags, dtype=torch.bool),
    )


def class_counts(dataset: Dataset, classes: int) -> list[int]:
    counts = [0] * classes
    for lbl in dataset.labels.tolist():
        if lbl >= classes:
            raise LabelOutOfRangeError(f"label {lbl} out of range for {classes} classes")
        counts[lbl] += 1
    return counts


def summarize(dataset: Dataset, classes: int) -> dict:
    return {
        "samples": len(dataset),
        "frames": int(dataset.sequences.shape[1]),
        "width": int(dataset.sequences.shape[2]),
        "class_counts": class_counts(dataset, classes),
        "degenerate": int(dataset.degenerate.sum()),
        "mean_trace": float(
            torch.diagonal(dataset.features, dim1=-2, dim2=-1).sum(-1).mean()
        ),
    }
