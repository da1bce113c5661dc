"""Pixel screening: drop near-constant pixels (A1) and pixels whose group means agree (A2).

Coordinates index column-major vectorized p x p images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

A1, A2, A3 = 1, 2, 3


def thresholds(n: int) -> tuple[float, float]:
    """(variance threshold 1/(2 log n), mean-difference threshold 1/log n)."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    return 1.0 / (2.0 * math.log(n)), 1.0 / math.log(n)


@dataclass(frozen=True, eq=False)
class PixelMask:
    p: int
    assignment: np.ndarray  # values in {1, 2, 3}, length p*p
    n: int
    t1: float
    t2: float

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int8)
        if a.shape != (self.p * self.p,):
            raise ValueError(f"assignment must have length p*p={self.p * self.p}, got {a.shape}")
        if not np.all((a >= A1) & (a <= A3)):
            raise ValueError("assignment values must be 1, 2 or 3")
        object.__setattr__(self, "assignment", a)

    def indices(self, keep: Union[int, Iterable[int]] = A3) -> np.ndarray:
        keep = {keep} if isinstance(keep, int) else set(keep)
        return np.flatnonzero(np.isin(self.assignment, list(keep)))

    def sizes(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.assignment == s)) for s in (A1, A2, A3))

    def percentages(self) -> tuple[float, float, float]:
        total = self.p * self.p
        return tuple(100.0 * c / total for c in self.sizes())

    def select(self, Z: np.ndarray, keep=A3) -> np.ndarray:
        """Columns of an (n, p*p) vectorized image matrix that survive the mask."""
        Z = np.asarray(Z)
        if Z.shape[-1] != self.p * self.p:
            raise ValueError(f"expected {self.p * self.p} columns, got {Z.shape[-1]}")
        return Z[..., self.indices(keep)]

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n": self.n,
            "t1": self.t1,
            "t2": self.t2,
            "assignment": "".join("0123"[v] for v in self.assignment),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PixelMask":
        assignment = np.frombuffer(d["assignment"].encode("ascii"), dtype=np.uint8) - ord("0")
        return cls(int(d["p"]), assignment, int(d["n"]), float(d["t1"]), float(d["t2"]))


@dataclass(frozen=True, eq=False)
class ScreeningStats:
    variance: np.ndarray
    mean1: np.ndarray
    mean2: np.ndarray
    pooled: np.ndarray
    d: np.ndarray


def _check_matrix(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"Z must be (n, p*p), got shape {Z.shape}")
    if Z.shape[0] < 2:
        raise ValueError("need at least 2 images")
    return Z


def _variance(Z: np.ndarray, ddof: int) -> np.ndarray:
    var = Z.var(axis=0, ddof=ddof)
    # exact zero for exactly constant columns
    var[Z.max(axis=0) == Z.min(axis=0)] = 0.0
    return var


def _group_mean(Z: np.ndarray) -> np.ndarray:
    lo = Z.min(axis=0)
    return np.where(Z.max(axis=0) == lo, lo, Z.mean(axis=0))


def pixel_variance(Z) -> np.ndarray:
    """Divide-by-n variance of each coordinate across the n images."""
    return _variance(_check_matrix(Z), ddof=0)


def estimate_A1(Z) -> np.ndarray:
    """Coordinates whose across-image variance is below 1/(2 log n)."""
    Z = _check_matrix(Z)
    t1, _ = thresholds(Z.shape[0])
    return np.flatnonzero(pixel_variance(Z) < t1)


def _split_groups(Z: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels)
    if y.shape != (Z.shape[0],):
        raise ValueError("labels must have one entry per row of Z")
    groups = np.unique(y)
    if groups.size != 2:
        raise ValueError(f"need exactly two groups, got {groups.size}")
    g1, g2 = Z[y == groups[0]], Z[y == groups[1]]
    if len(g1) < 2 or len(g2) < 2:
        raise ValueError(f"each group needs >= 2 members, got {len(g1)} and {len(g2)}")
    return g1, g2


def screening_stats(Z, labels) -> ScreeningStats:
    Z = _check_matrix(Z)
    g1, g2 = _split_groups(Z, labels)
    n1, n2 = len(g1), len(g2)
    mean1, mean2 = _group_mean(g1), _group_mean(g2)
    s1, s2 = _variance(g1, ddof=1), _variance(g2, ddof=1)
    pooled = ((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2)
    diff2 = (mean1 - mean2) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = diff2 / pooled
    d = np.where(pooled > 0, d, np.where(diff2 > 0, np.inf, 0.0))
    return ScreeningStats(pixel_variance(Z), mean1, mean2, pooled, d)


def mean_diff_stat(Z, labels) -> np.ndarray:
    """Squared group-mean difference over pooled sample variance, per coordinate.

    Zero pooled variance gives 0 when the means agree and +inf when they differ.
    Group order follows the sorted label values (normal=0 before abnormal=1).
    """
    return screening_stats(Z, labels).d


def estimate_mask(Z, labels) -> PixelMask:
    Z = _check_matrix(Z)
    n, q = Z.shape
    p = int(round(math.sqrt(q)))
    if p * p != q:
        raise ValueError(f"{q} columns is not a square image")
    t1, t2 = thresholds(n)
    stats = screening_stats(Z, labels)
    assignment = np.full(q, A3, dtype=np.int8)
    low_var = stats.variance < t1
    assignment[low_var] = A1
    assignment[~low_var & (stats.d < t2)] = A2
    return PixelMask(p, assignment, n, t1, t2)


def union_mask(masks: Sequence[PixelMask]) -> PixelMask:
    """Keep a pixel if any mask keeps it; among the rest, A1 only if every mask says A1."""
    if not masks:
        raise ValueError("need at least one mask")
    p = masks[0].p
    if any(mk.p != p for mk in masks):
        raise ValueError("masks differ in p")
    stack = np.vstack([mk.assignment for mk in masks])
    assignment = np.where((stack == A3).any(axis=0), A3, np.where((stack == A1).all(axis=0), A1, A2))
    return PixelMask(p, assignment, masks[0].n, masks[0].t1, masks[0].t2)


def vectorize(image: np.ndarray) -> np.ndarray:
    """Column-major vectorization of a p x p image (or a batch of them)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image.ravel(order="F")
    return image.transpose(0, 2, 1).reshape(image.shape[0], -1)


def apply_mask(image: np.ndarray, mask: PixelMask, keep=A3) -> np.ndarray:
    """Intensities of the kept coordinates in ascending (column-major) coordinate order."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (mask.p, mask.p):
        raise ValueError(f"image is {image.shape[-2:]} but mask expects {mask.p} x {mask.p}")
    return mask.select(vectorize(image), keep)
