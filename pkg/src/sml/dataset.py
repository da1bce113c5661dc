"""Image stacks, cohorts, the SPS1 stack file format and synthetic cohorts."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

MAGIC = b"SPS1"
HEADER = struct.Struct("<4sIIB3s")
FLAG_NORMALIZED = 0x01
LABELS = ("normal", "abnormal")


class StackFormatError(ValueError):
    """Base class for everything that can go wrong reading a stack file."""


class BadMagicError(StackFormatError):
    pass


class TruncatedPayloadError(StackFormatError):
    pass


class TooFewSlicesError(StackFormatError):
    pass


class NonFiniteError(StackFormatError):
    pass


@dataclass(frozen=True, eq=False)
class ImageStack:
    """One scan: ``slices`` has shape (m, p, p), intensities in [0, 1]."""

    patient_id: str
    slices: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.slices, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"slices must have shape (m, p, p), got {arr.shape}")
        if arr.shape[0] < 2:
            raise TooFewSlicesError(f"{self.patient_id}: need at least 2 slices, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{self.patient_id}: non-finite intensities")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{self.patient_id}: intensities outside [0, 1]; normalize first")
        object.__setattr__(self, "slices", arr)

    @property
    def m(self) -> int:
        return self.slices.shape[0]

    @property
    def p(self) -> int:
        return self.slices.shape[1]

    def vectors(self) -> np.ndarray:
        """(m, p*p) matrix of column-major vectorized slices."""
        return self.slices.transpose(0, 2, 1).reshape(self.m, -1)


StackSource = Union[ImageStack, Path, Callable[[], ImageStack]]


@dataclass(frozen=True)
class Patient:
    """A cohort member. ``source`` is loaded on demand so large cohorts need not fit in memory."""

    patient_id: str
    label: Optional[str]
    source: StackSource = field(repr=False)
    target_p: Optional[int] = None

    def load(self) -> ImageStack:
        if isinstance(self.source, ImageStack):
            stack = self.source
        elif isinstance(self.source, (str, Path)):
            stack = read_stack(self.source, patient_id=self.patient_id)
        else:
            stack = self.source()
        if self.target_p is not None and stack.p != self.target_p:
            resized = np.stack([resize_bilinear(s, self.target_p) for s in stack.slices])
            stack = ImageStack(stack.patient_id, resized)
        return stack

    @property
    def y(self) -> int:
        if self.label not in LABELS:
            raise ValueError(f"{self.patient_id}: no usable label ({self.label!r})")
        return LABELS.index(self.label)


@dataclass(frozen=True)
class Cohort:
    patients: tuple[Patient, ...]

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        ids = [pt.patient_id for pt in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("patient_id values must be unique")
        for pt in self.patients:
            if pt.label is not None and pt.label not in LABELS:
                raise ValueError(f"{pt.patient_id}: label must be one of {LABELS}, got {pt.label!r}")

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self) -> Iterator[Patient]:
        return iter(self.patients)

    @property
    def ids(self) -> list[str]:
        return [pt.patient_id for pt in self.patients]

    @property
    def labelled(self) -> bool:
        return all(pt.label is not None for pt in self.patients)

    def y(self) -> np.ndarray:
        """0 for normal, 1 for abnormal."""
        return np.array([pt.y for pt in self.patients], dtype=np.int64)

    def counts(self) -> tuple[int, int]:
        y = self.y()
        return int(np.sum(y == 0)), int(np.sum(y == 1))

    def check_trainable(self) -> None:
        n1, n2 = self.counts()
        if n1 < 2 or n2 < 2:
            raise ValueError(f"training cohort needs >= 2 patients per label, got normal={n1}, abnormal={n2}")


# -- SPS1 files ---------------------------------------------------------------

def write_stack(stack: ImageStack, path, normalized: bool = True) -> None:
    m, p = stack.m, stack.p
    header = HEADER.pack(MAGIC, m, p, FLAG_NORMALIZED if normalized else 0, b"\0\0\0")
    payload = stack.slices.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_stack(path, patient_id: Optional[str] = None) -> ImageStack:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, m, p, flags, reserved = HEADER.unpack_from(raw)
    if reserved != b"\0\0\0":
        raise StackFormatError(f"{path}: reserved header bytes must be zero")
    if m < 2:
        raise TooFewSlicesError(f"{path}: m={m} < 2")
    expected = m * p * p * 4
    payload = raw[HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(m, p, p)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: non-finite values in payload")
    pid = patient_id if patient_id is not None else path.stem
    if not flags & FLAG_NORMALIZED:
        return normalize_intensity(values, patient_id=pid)
    return ImageStack(pid, values)


# -- preprocessing --------------------------------------------------------------

def resize_bilinear(image: np.ndarray, p: int) -> np.ndarray:
    """Bilinear resampling of a square image to p x p on a corner-aligned grid."""
    image = np.asarray(image, dtype=np.float64)
    q = image.shape[0]
    if image.shape != (q, q) or q < 1 or p < 1:
        raise ValueError(f"expected a non-empty square image and p >= 1, got {image.shape}, p={p}")
    if p == q:
        return image.copy()

    def axis_weights(q: int, p: int):
        if p == 1:
            pos = np.array([(q - 1) / 2.0])
        else:
            pos = np.arange(p) * ((q - 1) / (p - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, q - 1)
        hi = np.minimum(lo + 1, q - 1)
        frac = pos - lo
        return lo, hi, frac

    r0, r1, fr = axis_weights(q, p)
    rows = image[r0] * (1.0 - fr)[:, None] + image[r1] * fr[:, None]
    c0, c1, fc = axis_weights(q, p)
    out = rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]
    # convex combinations can still drift by an ulp
    return np.clip(out, image.min(), image.max())


def normalize_intensity(stack, patient_id: Optional[str] = None) -> ImageStack:
    """Affine map of the whole stack into [0, 1] by its global min and max.

    Accepts an ImageStack or a raw (m, p, p) array. A constant stack becomes all 0.5.
    """
    if isinstance(stack, ImageStack):
        values, pid = stack.slices, stack.patient_id
    else:
        values, pid = np.asarray(stack, dtype=np.float64), patient_id or ""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{pid}: non-finite intensities")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        out = np.full(values.shape, 0.5)
    else:
        out = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return ImageStack(pid, out)


# -- synthetic cohorts ----------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    """Two slice clusters per scan; abnormal scans carry an offset on planted pixels of cluster A.

    Cluster A occupies the first ``cluster_fraction`` of each scan's slices (it plays the
    role of the chest section, B the abdomen). Inside a centred body disk the two clusters
    have mirrored two-level patterns: A sits at 0.5 - mean_shift/2 on the upper half and
    0.5 + mean_shift/2 on the lower half, B the other way round, so every body pixel differs
    by ``mean_shift`` between clusters. Pixels outside the disk are background and stay
    exactly 0. A planted signal pixel moves by label_signal towards the opposite level:
    brighter in the upper half, darker in the lower half (a lesion both brightens and
    darkens tissue).
    """

    n_normal: int = 20
    n_abnormal: int = 20
    m_range: tuple[int, int] = (40, 80)
    p: int = 16
    cluster_fraction: float = 0.1
    mean_shift: float = 0.2
    label_signal: float = 0.35
    noise_sd: float = 0.35
    signal_pixel_fraction: float = 0.15
    body_radius: float = 0.45

    def __post_init__(self):
        for name in ("cluster_fraction", "signal_pixel_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be > 0")
        lo, hi = self.m_range
        if lo < 4 or hi < lo:
            raise ValueError(f"m_range must satisfy 4 <= min <= max, got {self.m_range}")
        if self.n_normal < 0 or self.n_abnormal < 0 or self.p < 2:
            raise ValueError("counts must be >= 0 and p >= 2")
        if not 0.0 < self.body_radius <= 0.5 * math.sqrt(2):
            raise ValueError("body_radius must be in (0, sqrt(2)/2]")
        if self.signal_pixels_count() > len(self.body_pixels()):
            raise ValueError("signal_pixel_fraction too large for the body region")
        object.__setattr__(self, "m_range", (int(lo), int(hi)))

    def body_pixels(self) -> np.ndarray:
        """Row-major flat indices of the body disk."""
        c = (self.p - 1) / 2.0
        yy, xx = np.mgrid[: self.p, : self.p]
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        return np.flatnonzero(r2.ravel() <= (self.body_radius * self.p) ** 2)

    def signal_pixels_count(self) -> int:
        return max(1, int(round(self.signal_pixel_fraction * self.p * self.p)))


def signal_pixels(params: SynthParams, seed: int) -> np.ndarray:
    """Row-major flat indices of the planted signal subset (sorted)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5167]))
    body = params.body_pixels()
    return np.sort(rng.choice(body, size=params.signal_pixels_count(), replace=False))


def synth_stack(params: SynthParams, seed: int, index: int, abnormal: bool) -> ImageStack:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    p = params.p
    m = int(rng.integers(params.m_range[0], params.m_range[1] + 1))
    n_a = min(m - 1, max(1, int(round(params.cluster_fraction * m))))
    body = params.body_pixels()
    upper = np.where(body // p < p / 2, 1.0, -1.0)
    cluster_a = 0.5 - upper * (params.mean_shift / 2)
    base = np.where((np.arange(m) < n_a)[:, None], cluster_a[None, :], 1.0 - cluster_a[None, :])

    flat = np.zeros((m, p * p))
    flat[:, body] = base + params.noise_sd * rng.standard_normal((m, body.size))
    if abnormal:
        sig = signal_pixels(params, seed)
        # push each planted pixel towards the other cluster's level so it is not lost to clipping
        offsets = params.label_signal * np.where(sig // p < p / 2, 1.0, -1.0)
        flat[:n_a, sig] += offsets
    np.clip(flat, 0.0, 1.0, out=flat)
    return ImageStack(f"P{index:04d}", flat.reshape(m, p, p))


def synth_cohort(params: SynthParams, seed: int, lazy: bool = False) -> Cohort:
    """Deterministic synthetic cohort; normals first. Patient k's stream is seeded by (seed, k)."""
    patients = []
    total = params.n_normal + params.n_abnormal
    for k in range(total):
        abnormal = k >= params.n_normal
        label = LABELS[int(abnormal)]
        make = partial(synth_stack, params, seed, k, abnormal)
        patients.append(Patient(f"P{k:04d}", label, make if lazy else make()))
    return Cohort(tuple(patients))


def planted_partition(n_normal: int, n_abnormal: int, p: int, frac_constant: float = 0.2,
                      frac_noise: float = 0.4, effect: float = 1.0, seed: int = 0):
    """Pixel matrix with a known A1/A2/A3 partition for screening checks.

    Constant pixels hold a per-pixel constant, noise pixels are arcsine-distributed
    (Beta(1/2, 1/2), variance 1/8) with equal means in both groups, and signal pixels are
    Bernoulli with group means 0.5 -/+ delta/2 where delta is set so the population value
    of the squared-mean-difference over pooled variance equals ``effect``.

    Returns (Z, y, truth) with Z of shape (n, p*p), y in {0, 1}, truth in {1, 2, 3}.
    """
    rng = np.random.default_rng(seed)
    n, q = n_normal + n_abnormal, p * p
    y = np.r_[np.zeros(n_normal, dtype=np.int64), np.ones(n_abnormal, dtype=np.int64)]
    n_const = int(round(frac_constant * q))
    n_noise = int(round(frac_noise * q))
    truth = np.full(q, 3, dtype=np.int64)
    perm = rng.permutation(q)
    truth[perm[:n_const]] = 1
    truth[perm[n_const:n_const + n_noise]] = 2

    Z = np.empty((n, q))
    const_cols = truth == 1
    Z[:, const_cols] = rng.uniform(0, 1, size=const_cols.sum())[None, :]
    noise_cols = truth == 2
    Z[:, noise_cols] = rng.beta(0.5, 0.5, size=(n, noise_cols.sum()))
    sig_cols = truth == 3
    delta = math.sqrt(0.25 * effect / (1.0 + effect / 4.0))
    prob = np.where(y == 1, 0.5 + delta / 2, 0.5 - delta / 2)[:, None]
    Z[:, sig_cols] = (rng.uniform(size=(n, sig_cols.sum())) < prob).astype(np.float64)
    return Z, y, truth


# -- splits and manifests -----------------------------------------------------

def split_train_test(cohort: Cohort, n_normal_train: int, n_abnormal_train: int, seed: int):
    """Stratified random split; the test part must be non-empty."""
    y = cohort.y()
    idx0, idx1 = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
    if n_normal_train > idx0.size or n_abnormal_train > idx1.size:
        raise ValueError(
            f"requested {n_normal_train}+{n_abnormal_train} training patients, "
            f"cohort has {idx0.size} normal and {idx1.size} abnormal"
        )
    if n_normal_train < 0 or n_abnormal_train < 0:
        raise ValueError("training counts must be non-negative")
    if n_normal_train + n_abnormal_train == len(cohort):
        raise ValueError("split leaves an empty test cohort")
    rng = np.random.default_rng(seed)
    train0 = rng.choice(idx0, size=n_normal_train, replace=False)
    train1 = rng.choice(idx1, size=n_abnormal_train, replace=False)
    in_train = np.zeros(len(cohort), dtype=bool)
    in_train[train0] = True
    in_train[train1] = True
    pts = cohort.patients
    train = Cohort(tuple(pt for pt, t in zip(pts, in_train) if t))
    test = Cohort(tuple(pt for pt, t in zip(pts, in_train) if not t))
    return train, test


def read_manifest(path, target_p: Optional[int] = None) -> Cohort:
    """Manifest CSV with header ``patient_id,label,path``; paths resolve relative to the manifest."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:3] != ["patient_id", "label", "path"]:
            raise ValueError(f"{path}: header must be patient_id,label,path")
        patients = []
        for row in reader:
            label = row["label"].strip() or None
            stack_path = Path(row["path"])
            if not stack_path.is_absolute():
                stack_path = path.parent / stack_path
            patients.append(Patient(row["patient_id"], label, stack_path, target_p))
    return Cohort(tuple(patients))


def write_manifest(rows: Sequence[tuple[str, Optional[str], str]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "label", "path"])
        for pid, label, p in rows:
            writer.writerow([pid, label or "", p])
