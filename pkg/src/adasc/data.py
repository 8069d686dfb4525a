"""Domain-tagged datasets, split / oversampling / batch-composition rules, synthetic shifts."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import SAMPLE_RATE, N_FFT, LOG_FLOOR, FeatureMatrix, mel_filterbank

SCENES = (
    "airport", "bus", "metro", "metro_station", "park", "public_square",
    "shopping_mall", "street_pedestrian", "street_traffic", "tram",
)

# Files per device in the train / validation / test partitions.
DEVICE_SPLIT_COUNTS = {
    "A": (5510, 612, 2518),
    "B": (486, 54, 180),
    "C": (486, 54, 180),
}


class AllocationError(ValueError):
    """A split plan asks for more files than a device has."""


class SealedLabels:
    """Labels kept out of the adaptation path; only evaluation unseals them."""

    def __init__(self, labels):
        self._labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._labels)

    def __repr__(self) -> str:
        return f"SealedLabels(n={len(self._labels)})"

    def unseal(self) -> np.ndarray:
        return self._labels.copy()

    def take(self, idx) -> "SealedLabels":
        return SealedLabels(self._labels[idx])


@dataclass
class Example:
    features: np.ndarray
    label: int | None
    device: str
    clip_id: str


@dataclass
class DomainDataset:
    features: np.ndarray  # (N, ...) stacked examples
    labels: np.ndarray | None
    devices: np.ndarray
    clip_ids: np.ndarray
    role: str = "source"
    class_names: tuple[str, ...] = SCENES
    oracle: SealedLabels | None = None

    def __post_init__(self):
        n = len(self.features)
        if len(self.devices) != n or len(self.clip_ids) != n:
            raise ValueError("features, devices and clip ids must have equal length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != n:
                raise ValueError("labels must match the number of examples")
            if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
                raise ValueError("label outside the class-name range")
        elif self.role == "source" and n:
            raise ValueError("source-domain examples must carry labels")

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Example:
        label = None if self.labels is None else int(self.labels[i])
        return Example(self.features[i], label, str(self.devices[i]), str(self.clip_ids[i]))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainDataset(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.devices[idx],
            self.clip_ids[idx],
            self.role,
            self.class_names,
            None if self.oracle is None else self.oracle.take(idx),
        )

    def where_device(self, device: str) -> "DomainDataset":
        return self.subset(np.flatnonzero(self.devices == device))

    def evaluation_labels(self) -> np.ndarray:
        if self.labels is not None:
            return self.labels
        if self.oracle is None:
            raise ValueError("dataset has no labels to evaluate against")
        return self.oracle.unseal()

    def as_target(self) -> "DomainDataset":
        """Same examples with labels moved behind the evaluation seal."""
        sealed = self.oracle if self.labels is None else SealedLabels(self.labels)
        return DomainDataset(self.features, None, self.devices, self.clip_ids, "target", self.class_names, sealed)

    def one_hot(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[idx]
        return np.eye(self.n_classes, dtype=self.features.dtype)[labels]


# ---------------------------------------------------------------- manifests & splits


@dataclass(frozen=True)
class ManifestRow:
    clip_id: str
    path: str
    device: str
    scene: str = ""


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """CSV with columns clip_id, path, device, scene."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"clip_id", "path", "device"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
        return [ManifestRow(r["clip_id"], r["path"], r["device"], r.get("scene") or "") for r in reader]


def write_manifest(rows: Iterable[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "path", "device", "scene"])
        for r in rows:
            w.writerow([r.clip_id, r.path, r.device, r.scene])


@dataclass
class SplitPlan:
    counts: Mapping[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEVICE_SPLIT_COUNTS))
    seed: int = 0
    proportional: bool = True

    def allocate(self, device: str, total: int) -> tuple[int, int, int]:
        if device not in self.counts:
            raise AllocationError(f"split plan has no entry for device {device!r}")
        train, val, test = self.counts[device]
        planned = train + val + test
        if planned == total:
            return train, val, test
        if not self.proportional:
            raise AllocationError(f"device {device}: plan needs {planned} files, manifest has {total}")
        val_n = total * val // planned
        test_n = total * test // planned
        return total - val_n - test_n, val_n, test_n


def split_dataset(manifest: Sequence[ManifestRow], plan: SplitPlan | None = None):
    """Partition manifest rows per device into (train, validation, test) row lists."""
    plan = plan or SplitPlan()
    rng = np.random.default_rng(plan.seed)
    out: tuple[list, list, list] = ([], [], [])
    for device in sorted({r.device for r in manifest}):
        rows = sorted((r for r in manifest if r.device == device), key=lambda r: r.clip_id)
        counts = plan.allocate(device, len(rows))
        order = rng.permutation(len(rows))
        start = 0
        for part, n in zip(out, counts):
            part.extend(rows[i] for i in order[start : start + n])
            start += n
    return out


def rows_to_dataset(rows: Sequence[ManifestRow], features: Mapping[str, np.ndarray], role: str,
                    class_names: Sequence[str] = SCENES) -> DomainDataset:
    """Stack stored feature matrices (n_mels, frames) into (N, 1, n_mels, frames)."""
    if rows:
        x = np.stack([np.asarray(features[r.clip_id])[None] for r in rows])
    else:
        x = np.zeros((0, 1, 1, 1))
    index = {name: i for i, name in enumerate(class_names)}
    labels = np.array([index[r.scene] for r in rows], dtype=np.int64) if all(r.scene for r in rows) else None
    ds = DomainDataset(x, labels, np.array([r.device for r in rows]), np.array([r.clip_id for r in rows]),
                       "source", tuple(class_names))
    if role == "target":
        ds = ds.as_target()
    return ds


# ---------------------------------------------------------------- sampling


def oversample_target(target: DomainDataset, n_source: int, seed: int = 0) -> DomainDataset:
    """Repeat every target example floor(n_source / N_T) times, fill the rest without replacement."""
    n_t = len(target)
    if n_t == 0:
        raise ValueError("cannot oversample an empty target set")
    rng = np.random.default_rng(seed)
    reps, rem = divmod(n_source, n_t)
    idx = np.concatenate([np.tile(np.arange(n_t), reps), rng.choice(n_t, size=rem, replace=False)])
    return target.subset(idx[rng.permutation(len(idx))])


def compose_pretrain_batches(n_examples: int, batch_size: int = 38, seed: int = 0) -> list[np.ndarray]:
    """One epoch of source-only minibatch indices; the final short batch is kept."""
    if n_examples <= 0:
        raise ValueError("source set is empty")
    order = np.random.default_rng(seed).permutation(n_examples)
    return [order[i : i + batch_size] for i in range(0, n_examples, batch_size)]


@dataclass
class AdaptBatch:
    source: np.ndarray
    targets: tuple[np.ndarray, ...]  # one index array per target set (B, C) or a single one


def compose_adapt_batches(n_source: int, target_sizes: Sequence[int], seed: int = 0,
                          n_source_per_batch: int = 10, n_target_per_batch: int = 6) -> list[AdaptBatch]:
    """One adaptation epoch of (10 source, 3 + 3 target) index batches.

    The target slots are split evenly over the target sets. The epoch covers
    the target sets once; leftover target examples that cannot fill a batch are
    dropped. Source indices cycle through fresh permutations as needed.
    """
    if n_source <= 0 or not target_sizes or min(target_sizes) <= 0:
        raise ValueError("source and every target set must be non-empty")
    k, extra = divmod(n_target_per_batch, len(target_sizes))
    if extra:
        raise ValueError(f"{n_target_per_batch} target slots cannot be split over {len(target_sizes)} sets")
    rng = np.random.default_rng(seed)
    target_orders = [rng.permutation(n) for n in target_sizes]
    n_batches = min(n // k for n in target_sizes)
    need = n_batches * n_source_per_batch
    source = np.concatenate([rng.permutation(n_source) for _ in range(-(-need // n_source))]) if need else np.zeros(0, int)
    return [
        AdaptBatch(
            source[b * n_source_per_batch : (b + 1) * n_source_per_batch],
            tuple(order[b * k : (b + 1) * k] for order in target_orders),
        )
        for b in range(n_batches)
    ]


# ---------------------------------------------------------------- synthetic domains


def _default_means():
    return ((0.0, 3.0), (2.6, -1.5), (-2.6, -1.5))


@dataclass
class SyntheticShiftConfig:
    n_classes: int = 3
    samples_per_class: int = 500
    class_means: tuple[tuple[float, ...], ...] = field(default_factory=_default_means)
    class_std: float = 0.8
    rotation_deg: float = 35.0
    translation: tuple[float, ...] = (2.0, -1.0)
    gain: tuple[float, ...] = (1.4, 0.8)
    noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if len(self.class_means) != self.n_classes:
            raise ValueError("need one class mean per class")
        values = [self.rotation_deg, self.noise, self.class_std, *self.translation, *self.gain]
        if not np.all(np.isfinite(values)):
            raise ValueError("shift parameters must be finite")

    @property
    def dim(self) -> int:
        return len(self.class_means[0])

    @classmethod
    def unshifted(cls, **kwargs) -> "SyntheticShiftConfig":
        cfg = cls(**kwargs)
        cfg.rotation_deg, cfg.noise = 0.0, 0.0
        cfg.translation = (0.0,) * cfg.dim
        cfg.gain = (1.0,) * cfg.dim
        return cfg


def shift_points(x: np.ndarray, cfg: SyntheticShiftConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate in the first two coordinates, scale per dimension, translate, add noise."""
    x = x.copy()
    theta = np.deg2rad(cfg.rotation_deg)
    c, s = np.cos(theta), np.sin(theta)
    x0, x1 = x[:, 0].copy(), x[:, 1].copy()
    x[:, 0], x[:, 1] = c * x0 - s * x1, s * x0 + c * x1
    x = x * np.asarray(cfg.gain) + np.asarray(cfg.translation)
    if cfg.noise:
        x = x + rng.normal(0.0, cfg.noise, size=x.shape)
    return x


def synth_domain_pair(cfg: SyntheticShiftConfig, dtype=np.float32) -> tuple[DomainDataset, DomainDataset]:
    """Labeled source blobs and a shifted, label-sealed copy of the same class structure."""
    rng = np.random.default_rng(cfg.seed)
    means = np.asarray(cfg.class_means, dtype=np.float64)
    names = tuple(f"class{k}" for k in range(cfg.n_classes))

    def blobs():
        labels = np.repeat(np.arange(cfg.n_classes), cfg.samples_per_class)
        x = means[labels] + rng.normal(0.0, cfg.class_std, size=(len(labels), cfg.dim))
        return x, labels

    xs, ys = blobs()
    xt, yt = blobs()
    xt = shift_points(xt, cfg, rng)
    n = len(ys)
    source = DomainDataset(xs.astype(dtype), ys, np.full(n, "synthetic-source"),
                           np.array([f"s{i}" for i in range(n)]), "source", names)
    target = DomainDataset(xt.astype(dtype), None, np.full(n, "synthetic-target"),
                           np.array([f"t{i}" for i in range(n)]), "target", names, SealedLabels(yt))
    return source, target


# ---------------------------------------------------------------- channel shift


def apply_channel_shift(features: FeatureMatrix | np.ndarray, tilt_db_per_octave: float = 0.0,
                        gain_db: float = 0.0, noise_floor: float = 0.0, *, sample_rate: int = SAMPLE_RATE,
                        n_fft: int = N_FFT, reference_hz: float = 1000.0):
    """Simulate a recording-device response on log-mel features (natural-log units).

    Each band moves by ``gain + tilt * log2(center / reference)`` dB; entries
    sitting at the extraction floor stay there. A positive ``noise_floor``
    (linear energy) then lifts every entry to at least ``log(noise_floor)``.
    """
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    if not np.all(np.isfinite([tilt_db_per_octave, gain_db, noise_floor])):
        raise ValueError("channel-shift parameters must be finite")
    offsets = band_offsets(values.shape[0], tilt_db_per_octave, gain_db, sample_rate=sample_rate,
                           n_fft=n_fft, reference_hz=reference_hz)
    floor = np.log(LOG_FLOOR)
    out = np.where(values > floor, values + offsets[:, None], values)
    if noise_floor > 0:
        out = np.maximum(out, np.log(noise_floor))
    if isinstance(features, FeatureMatrix):
        return FeatureMatrix(out, features.clip_id, features.device)
    return out


def band_offsets(n_mels: int, tilt_db_per_octave: float, gain_db: float, *, sample_rate: int = SAMPLE_RATE,
                 n_fft: int = N_FFT, reference_hz: float = 1000.0) -> np.ndarray:
    centers = mel_filterbank(n_mels, sample_rate, n_fft).centers_hz
    db = gain_db + tilt_db_per_octave * np.log2(centers / reference_hz)
    return db * np.log(10.0) / 10.0
