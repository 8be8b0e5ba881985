"""Dataset container format, splitting, SSDA label masking, batching, synthetic domain pairs."""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from .errors import DatasetFormatError

log = logging.getLogger(__name__)

META_FILENAME = "meta.json"
SAMPLES_FILENAME = "samples.bin"
LABELS_FILENAME = "labels.bin"
SAMPLE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<i4")
UNLABELED = -1
MIN_LENGTH = 8  # shortest series surviving three stride-2 poolings


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class TimeSeriesDataset:
    """Windowed samples [p, m, n] with optional labels (-1 = unlabeled)."""
    samples: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 3:
            raise DatasetFormatError(f"samples must be [p, m, n], got shape {self.samples.shape}")
        p, m, n = self.samples.shape
        if p < 1 or m < 1:
            raise DatasetFormatError(f"need p >= 1 and m >= 1, got p={p} m={m}")
        if n < MIN_LENGTH:
            raise DatasetFormatError(f"series length n={n} < {MIN_LENGTH}")
        if self.num_classes < 2:
            raise DatasetFormatError(f"num_classes must be >= 2, got {self.num_classes}")
        if not np.isfinite(self.samples).all():
            raise DatasetFormatError("samples contain NaN or Inf")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (p,):
                raise DatasetFormatError(f"labels must have shape ({p},), got {self.labels.shape}")
            known = self.labels[self.labels != UNLABELED]
            if known.size and (known.min() < 0 or known.max() >= self.num_classes):
                raise DatasetFormatError(f"label values must be -1 or in [0, {self.num_classes})")

    @property
    def p(self) -> int:
        return self.samples.shape[0]

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    @property
    def n(self) -> int:
        return self.samples.shape[2]

    @property
    def fully_labeled(self) -> bool:
        return self.labels is not None and bool((self.labels != UNLABELED).all())

    def subset(self, indices: np.ndarray) -> "TimeSeriesDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TimeSeriesDataset(
            samples=self.samples[idx],
            labels=None if self.labels is None else self.labels[idx],
            num_classes=self.num_classes,
        )

    def with_labels(self, labels: Optional[np.ndarray]) -> "TimeSeriesDataset":
        return TimeSeriesDataset(samples=self.samples, labels=labels, num_classes=self.num_classes)


@dataclass
class SplitPair:
    train: TimeSeriesDataset
    test: TimeSeriesDataset
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class SynthSpec:
    """Sinusoid classes with a controlled source -> target covariate shift."""
    num_classes: int = 6
    samples_per_class: int = 100
    channels: int = 3
    length: int = 128
    amplitude_scale: float = 1.0
    phase_offset: float = 0.0
    frequency_shift: float = 0.0  # cycles per window added to every target frequency
    frequency_jitter: float = 0.0  # per-sample uniform spread of that drift
    noise_std: float = 0.0
    seed: int = 0
    target_seed: Optional[int] = None  # None -> seed + 1

    def __post_init__(self) -> None:
        for name in ("num_classes", "samples_per_class", "channels", "length"):
            if getattr(self, name) < 1:
                raise DatasetFormatError(f"{name} must be positive")
        if self.num_classes < 2:
            raise DatasetFormatError("num_classes must be >= 2")
        if self.length < MIN_LENGTH:
            raise DatasetFormatError(f"length must be >= {MIN_LENGTH}")
        if self.noise_std < 0:
            raise DatasetFormatError("noise_std must be >= 0")
        if self.amplitude_scale <= 0:
            raise DatasetFormatError("amplitude_scale must be > 0")
        if self.frequency_jitter < 0:
            raise DatasetFormatError("frequency_jitter must be >= 0")
        if 2.0 + self.frequency_shift - self.frequency_jitter <= 0:
            raise DatasetFormatError("frequency_shift pushes the lowest class frequency to zero or below")


def load_dataset(path: Path) -> TimeSeriesDataset:
    """Read a dataset directory (meta.json + samples.bin [+ labels.bin])."""
    path = Path(path)
    meta_path = path / META_FILENAME
    samples_path = path / SAMPLES_FILENAME
    for required in (meta_path, samples_path):
        if not required.is_file():
            raise DatasetFormatError(f"missing {required.name} in {path}")
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
        p, m, n, k = (int(meta[key]) for key in ("p", "m", "n", "k"))
        has_labels = bool(meta["has_labels"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"bad {META_FILENAME} in {path}: {e}") from e
    if meta.get("dtype") != "f32le":
        raise DatasetFormatError(f"unsupported dtype {meta.get('dtype')!r}; expected 'f32le'")

    samples = np.fromfile(samples_path, dtype=SAMPLE_DTYPE)
    if samples.size != p * m * n or samples_path.stat().st_size != p * m * n * SAMPLE_DTYPE.itemsize:
        raise DatasetFormatError(
            f"{SAMPLES_FILENAME} holds {samples_path.stat().st_size} bytes; meta declares p={p} m={m} n={n}"
        )
    labels = None
    if has_labels:
        labels_path = path / LABELS_FILENAME
        if not labels_path.is_file():
            raise DatasetFormatError(f"meta has_labels=true but {LABELS_FILENAME} is missing in {path}")
        labels = np.fromfile(labels_path, dtype=LABEL_DTYPE)
        if labels.size != p or labels_path.stat().st_size != p * LABEL_DTYPE.itemsize:
            raise DatasetFormatError(f"{LABELS_FILENAME} holds {labels.size} entries; meta declares p={p}")
    ds = TimeSeriesDataset(samples=samples.reshape(p, m, n).astype(np.float32), labels=labels, num_classes=k)
    log.debug("Loaded %s: p=%d m=%d n=%d k=%d labels=%s", path, p, m, n, k, has_labels)
    return ds


def save_dataset(ds: TimeSeriesDataset, path: Path) -> None:
    """Write ds in the bit-exact container format; load_dataset inverts it."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"p": ds.p, "m": ds.m, "n": ds.n, "k": ds.num_classes, "dtype": "f32le", "has_labels": ds.labels is not None}
    with open(path / META_FILENAME, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    ds.samples.astype(SAMPLE_DTYPE).tofile(path / SAMPLES_FILENAME)
    labels_path = path / LABELS_FILENAME
    if ds.labels is not None:
        ds.labels.astype(LABEL_DTYPE).tofile(labels_path)
    elif labels_path.exists():
        labels_path.unlink()  # stale file from an earlier labeled save


def split_train_test(ds: TimeSeriesDataset, ratio: float, seed: int) -> SplitPair:
    """Seeded shuffle, then the first round(ratio * p) samples train and the rest test."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if ds.p < 2:
        raise DatasetFormatError(f"need at least 2 samples to split, got {ds.p}")
    # both sides stay non-empty
    n_train = min(max(_round_half_up(ratio * ds.p), 1), ds.p - 1)
    perm = np.random.default_rng(seed).permutation(ds.p)
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    return SplitPair(train=ds.subset(train_idx), test=ds.subset(test_idx), train_indices=train_idx, test_indices=test_idx)


def stratified_label_mask(ds: TimeSeriesDataset, fraction: float, seed: int):
    """Keep max(1, round(fraction * n_c)) labels per class as `given`; everything else unlabeled."""
    from .pseudolabel import PseudoLabelState

    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not ds.fully_labeled:
        raise DatasetFormatError("stratified_label_mask needs a fully labeled dataset")
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for c in range(ds.num_classes):
        idx_c = np.flatnonzero(ds.labels == c)
        if idx_c.size == 0:
            raise DatasetFormatError(f"class {c} has no samples; cannot keep labels for it")
        count = min(idx_c.size, max(1, _round_half_up(fraction * idx_c.size)))
        keep.append(rng.choice(idx_c, size=count, replace=False))
    kept = np.sort(np.concatenate(keep))
    return PseudoLabelState.from_given(ds.p, kept, ds.labels[kept])


def make_synthetic_pair(spec: SynthSpec) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Class k = per-channel sinusoids at class-dependent frequencies.

    The target is rescaled, phase-shifted and its frequencies drift by frequency_shift cycles
    (plus a per-sample uniform spread of frequency_jitter). Frequency carries the class, so a
    drift approaching half the class spacing moves target samples across source boundaries.
    """
    target_seed = spec.seed + 1 if spec.target_seed is None else spec.target_seed
    source = _synth_domain(spec, spec.seed, amplitude_scale=1.0, phase_offset=0.0)
    target = _synth_domain(spec, target_seed, amplitude_scale=spec.amplitude_scale, phase_offset=spec.phase_offset,
                           frequency_shift=spec.frequency_shift, frequency_jitter=spec.frequency_jitter)
    return source, target


def _synth_domain(spec: SynthSpec, seed: int, amplitude_scale: float, phase_offset: float,
                  frequency_shift: float = 0.0, frequency_jitter: float = 0.0) -> TimeSeriesDataset:
    rng = np.random.default_rng(seed)
    k, per, m, n = spec.num_classes, spec.samples_per_class, spec.channels, spec.length
    labels = np.repeat(np.arange(k), per)
    t = np.arange(n, dtype=np.float64) / n
    # cycles per window: classes spaced 1.5 cycles apart, channels offset by a quarter cycle
    cycles = 2.0 + 1.5 * labels[:, None] + 0.25 * np.arange(m)[None, :]
    channel_phase = np.pi * np.arange(m) / m
    jitter = rng.normal(0.0, 0.1, size=(k * per, m))
    amplitude = rng.uniform(0.9, 1.1, size=(k * per, m))
    drift = np.full((k * per, 1), frequency_shift)
    if frequency_jitter > 0:
        drift += rng.uniform(-frequency_jitter, frequency_jitter, size=(k * per, 1))
    cycles = cycles + drift
    phase = channel_phase[None, :] + jitter + phase_offset
    x = amplitude[..., None] * np.sin(2.0 * np.pi * cycles[..., None] * t[None, None, :] + phase[..., None])
    x *= amplitude_scale
    if spec.noise_std > 0:
        x += rng.normal(0.0, spec.noise_std, size=x.shape)
    return TimeSeriesDataset(samples=x.astype(np.float32), labels=labels, num_classes=k)


def _epoch_seed(seed: int, epoch_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch_index)]).generate_state(1)[0])


def batch_iter(
    data: Union[TimeSeriesDataset, tuple[np.ndarray, np.ndarray]],
    batch_size: int,
    seed: int,
    epoch_index: int,
) -> DataLoader:
    """One epoch of shuffled (samples, labels) batches keyed by (seed, epoch_index); last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if isinstance(data, TimeSeriesDataset):
        samples = data.samples
        labels = data.labels if data.labels is not None else np.full(data.p, UNLABELED, dtype=np.int64)
    else:
        samples, labels = data
    if len(samples) == 0:
        raise DatasetFormatError("cannot batch an empty dataset")
    if len(labels) != len(samples):
        raise DatasetFormatError(f"{len(samples)} samples but {len(labels)} labels")
    tensors = TensorDataset(
        torch.as_tensor(np.asarray(samples, dtype=np.float32)),
        torch.as_tensor(np.asarray(labels, dtype=np.int64)),
    )
    generator = torch.Generator().manual_seed(_epoch_seed(seed, epoch_index))
    return DataLoader(tensors, batch_size=batch_size, shuffle=True, drop_last=False, generator=generator)
