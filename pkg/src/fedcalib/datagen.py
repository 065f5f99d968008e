"""Synthetic embedding datasets and precomputed-embedding ingestion.

Synthetic data mimics the geometry the simulator studies: class prototypes
are drawn uniformly on the unit sphere, samples are unit-normalized noisy
copies of their class prototype, and the text-side prototypes (the class
name embedding analogue) are lightly perturbed copies of the image
prototypes. Each domain applies a fixed seeded orthogonal rotation and
mean shift to its samples before normalization, giving controlled
covariate shift between domains.

Precomputed embeddings can be ingested from two formats:

- binary: sample files with magic ``FEMB`` (u32 version = 1, u32 dim,
  u64 count, then per record u32 label, u32 domain, dim little-endian f32)
  and a prototype file with magic ``FPRO`` (u32 dim, u32 classes, then
  classes x dim little-endian f32)
- CSV: sample files with header ``label,domain,f0..f{d-1}`` and a prototype
  file with header ``label,f0..f{d-1}`` (one row per class, in label order)

Loaded rows are re-normalized to unit length, matching the synthetic path.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import RngStream, l2_normalize_rows
from .partition import LabeledDataset

# fixed shape of the per-domain covariate shift, relative to noise sigma
DOMAIN_ROTATION_ANGLE = 0.2
DOMAIN_SHIFT_SCALE = 0.3
TEXT_PERTURBATION_SCALE = 0.1


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic dataset."""

    class_count: int = 20
    dim: int = 64
    samples_per_class: int = 100  # per domain
    noise_sigma: float = 0.2
    domain_count: int = 1
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.class_count < 1 or self.dim < 2:
            raise ConfigError("need at least 1 class and dimension 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise sigma must be positive, got {self.noise_sigma}")
        if self.domain_count < 1:
            raise ConfigError("domain_count must be at least 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


def _domain_rotation(dim: int, rng: RngStream) -> list:
    """A fixed mild rotation as a list of (i, j, angle) Givens planes."""
    planes = []
    angles = rng.normal(dim // 2, scale=DOMAIN_ROTATION_ANGLE)
    for k in range(dim // 2):
        i = int(rng.u64(1)[0] % np.uint64(dim))
        j = int(rng.u64(1)[0] % np.uint64(dim - 1))
        if j >= i:
            j += 1
        planes.append((i, j, float(angles[k])))
    return planes


def _apply_rotation(x: np.ndarray, planes: list) -> np.ndarray:
    out = x.copy()
    for i, j, angle in planes:
        c, s = np.cos(angle), np.sin(angle)
        xi = out[:, i].copy()
        xj = out[:, j].copy()
        out[:, i] = c * xi - s * xj
        out[:, j] = s * xi + c * xj
    return out


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> tuple:
    """Build a labeled dataset plus its text-side prototype matrix.

    Returns ``(LabeledDataset, text_prototypes)``. The dataset is exactly
    label-balanced (samples_per_class per class per domain) and the
    train/test split is stratified within every class-domain block.
    """
    c, d = spec.class_count, spec.dim
    image_protos = l2_normalize_rows(rng.child("protos").normal(c * d).reshape(c, d))
    text_noise = rng.child("text-protos").normal(c * d).reshape(c, d)
    text_protos = l2_normalize_rows(
        image_protos + TEXT_PERTURBATION_SCALE * spec.noise_sigma * text_noise
    )

    blocks_x, blocks_y, blocks_dom, blocks_train = [], [], [], []
    n_train = int(round(spec.train_fraction * spec.samples_per_class))
    n_train = min(max(n_train, 1), spec.samples_per_class - 1) if spec.samples_per_class > 1 else 1
    for dom in range(spec.domain_count):
        dom_rng = rng.child("domain", dom)
        planes = _domain_rotation(d, dom_rng.child("rotation"))
        shift = dom_rng.child("shift").normal(d, scale=DOMAIN_SHIFT_SCALE * spec.noise_sigma)
        for cls in range(c):
            noise = rng.child("samples", dom, cls).normal(spec.samples_per_class * d)
            raw = image_protos[cls] + spec.noise_sigma * noise.reshape(spec.samples_per_class, d)
            raw = _apply_rotation(raw, planes) + shift
            blocks_x.append(l2_normalize_rows(raw))
            blocks_y.append(np.full(spec.samples_per_class, cls, dtype=np.int64))
            blocks_dom.append(np.full(spec.samples_per_class, dom, dtype=np.int64))
            tags = np.zeros(spec.samples_per_class, dtype=bool)
            tags[:n_train] = True
            blocks_train.append(tags)

    data = LabeledDataset(
        embeddings=np.vstack(blocks_x),
        labels=np.concatenate(blocks_y),
        domains=np.concatenate(blocks_dom),
        class_count=c,
        is_train=np.concatenate(blocks_train),
    )
    return data, text_protos


# ---------------------------------------------------------------------------
# binary FEMB / FPRO formats
# ---------------------------------------------------------------------------

_FEMB_MAGIC = b"FEMB"
_FPRO_MAGIC = b"FPRO"
_FEMB_VERSION = 1


def write_embeddings(path, embeddings: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float32)
    n, d = embeddings.shape
    with open(path, "wb") as fh:
        fh.write(_FEMB_MAGIC)
        fh.write(struct.pack("<IIQ", _FEMB_VERSION, d, n))
        for i in range(n):
            fh.write(struct.pack("<II", int(labels[i]), int(domains[i])))
            fh.write(embeddings[i].astype("<f4").tobytes())


def write_prototypes(path, prototypes: np.ndarray) -> None:
    prototypes = np.asarray(prototypes, dtype=np.float32)
    c, d = prototypes.shape
    with open(path, "wb") as fh:
        fh.write(_FPRO_MAGIC)
        fh.write(struct.pack("<II", d, c))
        fh.write(prototypes.astype("<f4").tobytes())


def _read_exact(fh, count: int, path, what: str) -> bytes:
    offset = fh.tell()
    blob = fh.read(count)
    if len(blob) != count:
        raise FormatError(f"{path}: truncated {what} at byte {offset} (wanted {count} bytes)")
    return blob


def read_embeddings(path) -> tuple:
    """Parse one FEMB file into (embeddings, labels, domains)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != _FEMB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {_FEMB_MAGIC!r}")
        version, d, n = struct.unpack("<IIQ", _read_exact(fh, 16, path, "header"))
        if version != _FEMB_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte 4")
        if d == 0:
            raise FormatError(f"{path}: zero dimension at byte 8")
        labels = np.empty(n, dtype=np.int64)
        domains = np.empty(n, dtype=np.int64)
        rows = np.empty((n, d), dtype=np.float64)
        for i in range(n):
            lab, dom = struct.unpack("<II", _read_exact(fh, 8, path, f"record {i} header"))
            payload = _read_exact(fh, 4 * d, path, f"record {i} payload")
            labels[i] = lab
            domains[i] = dom
            rows[i] = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: {len(trailing)}+ unexpected trailing bytes at byte {fh.tell() - 1}")
    return rows, labels, domains


def read_prototypes(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != _FPRO_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {_FPRO_MAGIC!r}")
        d, c = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        if d == 0 or c == 0:
            raise FormatError(f"{path}: zero dimension or class count at byte 4")
        payload = _read_exact(fh, 4 * d * c, path, "prototype payload")
        return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(c, d)


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------


def _read_embedding_csv(path) -> tuple:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "label" or header[1] != "domain":
            raise FormatError(f"{path}: header must start with 'label,domain,f0,...'")
        d = len(header) - 2
        expected = ["label", "domain"] + [f"f{i}" for i in range(d)]
        if header != expected:
            raise FormatError(f"{path}: header columns must be {','.join(expected[:4])},...")
        rows, labels, domains = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {d + 2}")
            try:
                labels.append(int(row[0]))
                domains.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return (
        np.asarray(rows, dtype=np.float64),
        np.asarray(labels, dtype=np.int64),
        np.asarray(domains, dtype=np.int64),
    )


def _read_prototype_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = ["label"] + [f"f{i}" for i in range(d)]
        if d < 1 or header != expected:
            raise FormatError(f"{path}: header must be 'label,f0,...,f{{d-1}}'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {d + 1}")
            if int(row[0]) != lineno - 2:
                raise FormatError(f"{path}: line {lineno}: prototype rows must be in label order")
            rows.append([float(v) for v in row[1:]])
    return np.asarray(rows, dtype=np.float64)


def load_embeddings(train_path, test_path, prototypes_path) -> tuple:
    """Ingest precomputed embeddings; returns (LabeledDataset, prototypes).

    Paths ending in ``.csv`` use the CSV layout, anything else the binary
    layout. Sample rows and prototypes are re-normalized to unit length,
    and prototype count and dimension are checked against the data.
    """
    def read_samples(path):
        if str(path).endswith(".csv"):
            return _read_embedding_csv(path)
        return read_embeddings(path)

    tr_x, tr_y, tr_dom = read_samples(train_path)
    te_x, te_y, te_dom = read_samples(test_path)
    if tr_x.shape[1] != te_x.shape[1]:
        raise FormatError(
            f"train dimension {tr_x.shape[1]} does not match test dimension {te_x.shape[1]}"
        )
    if str(prototypes_path).endswith(".csv"):
        protos = _read_prototype_csv(prototypes_path)
    else:
        protos = read_prototypes(prototypes_path)
    if protos.shape[1] != tr_x.shape[1]:
        raise FormatError(
            f"prototype dimension {protos.shape[1]} does not match sample dimension {tr_x.shape[1]}"
        )
    class_count = int(max(tr_y.max(initial=-1), te_y.max(initial=-1))) + 1
    if class_count < 1:
        raise FormatError("embedding files contain no samples")
    if protos.shape[0] != class_count:
        raise FormatError(
            f"prototype file has {protos.shape[0]} classes but labels imply {class_count}"
        )
    x = np.vstack([tr_x, te_x])
    data = LabeledDataset(
        embeddings=l2_normalize_rows(x),
        labels=np.concatenate([tr_y, te_y]),
        domains=np.concatenate([tr_dom, te_dom]),
        class_count=class_count,
        is_train=np.concatenate([np.ones(len(tr_y), bool), np.zeros(len(te_y), bool)]),
    )
    return data, l2_normalize_rows(protos)


def write_embedding_csv(path, embeddings: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> None:
    d = embeddings.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "domain"] + [f"f{i}" for i in range(d)])
        for i in range(embeddings.shape[0]):
            writer.writerow(
                [int(labels[i]), int(domains[i])] + [f"{v:.8g}" for v in embeddings[i]]
            )
