"""Data-driven choice of the quantile levels and the spike eigenvector by K-means misclustering."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import Cohort
from .screening import A2, A3, estimate_mask
from .spectral import SpikeBasis, quantile_indices, spike_basis

QUANTILE_STEPS = {5: 0.005, 9: 0.0025}


def default_grid(step: float = 0.02) -> np.ndarray:
    count = int(round(1.0 / step))
    if count < 1 or abs(count * step - 1.0) > 1e-9:
        raise ValueError(f"grid step must divide 1, got {step}")
    return np.round(np.arange(count + 1) * step, 10)


@dataclass(frozen=True)
class AlphaSelection:
    ell: int
    alphas: tuple[float, ...]
    grid: tuple[float, ...]
    errors: tuple[tuple[float, ...], tuple[float, ...]]  # errors[ell - 1][grid index]
    alpha_star: float

    @property
    def min_error(self) -> float:
        return min(self.errors[self.ell - 1])

    def to_dict(self) -> dict:
        return {
            "ell": self.ell,
            "alphas": list(self.alphas),
            "alpha_star": self.alpha_star,
            "grid": list(self.grid),
            "errors": [list(e) for e in self.errors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaSelection":
        return cls(
            ell=int(d["ell"]),
            alphas=tuple(float(a) for a in d["alphas"]),
            grid=tuple(float(a) for a in d["grid"]),
            errors=tuple(tuple(float(e) for e in row) for row in d["errors"]),
            alpha_star=float(d["alpha_star"]),
        )


def patient_gram(features: np.ndarray) -> np.ndarray:
    """Uncentered inner products between patients' masked image vectors."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] == 0:
        raise ValueError("patient_gram needs at least one kept pixel")
    G = F @ F.T
    return np.triu(G) + np.triu(G, 1).T


def _kmeans_pp(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    first = rng.integers(n)
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    total = d2.sum()
    second = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
    return points[[first, second]].copy()


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        new = centers.copy()
        for j in range(2):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                own = dist[np.arange(len(points)), labels]
                far = int(np.argmax(own))
                if own[far] == 0:
                    continue  # all points coincide with their centres
                new[j] = points[far]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(len(points)), labels].sum())
    return labels, inertia


def kmeans2(points: np.ndarray, seed: int = 0, restarts: int = 10, max_iter: int = 300,
            tol: float = 1e-9) -> np.ndarray:
    """Two-cluster Lloyd's algorithm, best of ``restarts`` k-means++ starts by inertia.

    Labels are relabelled so that the first point is in cluster 0.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 2:
        raise ValueError("kmeans2 needs an (n, d) array with n >= 2")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(max(1, restarts)):
        labels, inertia = _lloyd(points, _kmeans_pp(points, rng), max_iter, tol)
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    if best[0] == 1:
        best = 1 - best
    return best


def misclustering_error(pred, truth) -> float:
    """Fraction of mismatches, minimized over the two ways of matching clusters to classes."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")

    def binarize(x):
        values = np.unique(x)
        if values.size > 2:
            raise ValueError("more than two classes")
        return x == values[-1] if values.size == 2 else np.zeros(x.shape, dtype=bool)

    wrong = int(np.sum(binarize(pred) != binarize(truth)))
    return min(wrong, pred.size - wrong) / pred.size


def spectral_embedding(features: np.ndarray) -> np.ndarray:
    """Top-2 eigenvectors of the patient Gram matrix, one 2-D point per patient."""
    G = patient_gram(features)
    n = G.shape[0]
    w, V = np.linalg.eigh(G)
    return V[:, ::-1][:, : min(2, n)]


@dataclass
class QuantileBank:
    """Candidate quantile images of every patient at every grid level, for both eigenvectors.

    Only the distinct slices a patient needs are stored (float32, column-major vectors).
    """

    grid: np.ndarray
    slots: list[np.ndarray] = field(default_factory=list)  # per patient: (2, G) rows into store
    store: list[np.ndarray] = field(default_factory=list)  # per patient: (u, p*p)

    def add(self, vectors: np.ndarray, basis: SpikeBasis) -> None:
        idx = np.vstack([quantile_indices(basis, ell, self.grid) for ell in (1, 2)])
        uniq, inverse = np.unique(idx, return_inverse=True)
        self.slots.append(inverse.reshape(idx.shape))
        self.store.append(np.asarray(vectors[uniq], dtype=np.float32))

    def matrix(self, ell: int, g: int) -> np.ndarray:
        return np.vstack([s[slot[ell - 1, g]] for s, slot in zip(self.store, self.slots)]).astype(np.float64)


def scan_cohort(cohort, grid: np.ndarray, workers: int = 1):
    """One pass over the cohort: spike bases and the quantile bank for ``grid``.

    ``cohort`` is a Cohort or any sequence of objects with a ``load()`` method.
    """
    patients = cohort.patients if isinstance(cohort, Cohort) else list(cohort)

    def work(pt):
        stack = pt.load()
        return stack.vectors(), spike_basis(stack)

    bank = QuantileBank(np.asarray(grid, dtype=np.float64))
    bases = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for vectors, basis in pool.map(work, patients):
            bank.add(vectors, basis)
            bases.append(basis)
    return bases, bank


def grid_point_error(Z: np.ndarray, y: np.ndarray, seed, restarts: int = 10,
                     gram_pixels: str = "A3") -> float:
    """Misclustering error of K-means on the spectral embedding of the screened images."""
    mask = estimate_mask(Z, y)
    keep = {"A3": A3, "A2": A2}[gram_pixels]
    cols = mask.indices(keep)
    if cols.size == 0:
        return 0.5
    emb = spectral_embedding(Z[:, cols])
    pred = kmeans2(emb, seed=seed, restarts=restarts)
    return misclustering_error(pred, y)


def quantile_levels(alpha_star: float, quantile_count: int) -> tuple[float, ...]:
    if quantile_count not in QUANTILE_STEPS:
        raise ValueError(f"quantile_count must be 5 or 9, got {quantile_count}")
    step = QUANTILE_STEPS[quantile_count]
    return tuple(float(min(1.0, round(alpha_star + j * step, 10))) for j in range(quantile_count))


def select_alphas(train: Cohort, bases: Optional[Sequence[SpikeBasis]] = None,
                  grid: Optional[Sequence[float]] = None, quantile_count: int = 9, *,
                  seed: int = 0, restarts: int = 10, gram_pixels: str = "A3",
                  bank: Optional[QuantileBank] = None, workers: int = 1) -> AlphaSelection:
    """Score every (alpha, ell) grid point and anchor the quantile levels at the best one.

    ``ell`` is the eigenvector with the smaller minimum error (ties go to ell=1) and
    alpha* is the first grid level attaining it.
    """
    train.check_trainable()
    y = train.y()
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    if bank is None:
        if bases is None:
            bases, bank = scan_cohort(train, grid, workers)
        else:
            bank = QuantileBank(grid)
            for pt, basis in zip(train.patients, bases):
                bank.add(pt.load().vectors(), basis)
    elif not np.array_equal(bank.grid, grid):
        raise ValueError("bank was built for a different grid")

    points = [(ell, g) for ell in (1, 2) for g in range(grid.size)]

    def score(point):
        ell, g = point
        sub = np.random.SeedSequence([seed, ell, g]).generate_state(1)[0]
        return grid_point_error(bank.matrix(ell, g), y, int(sub), restarts, gram_pixels)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        flat = list(pool.map(score, points))
    errors = np.array(flat).reshape(2, grid.size)

    best = errors.min(axis=1)
    ell = 1 if best[0] <= best[1] else 2
    alpha_star = float(grid[int(np.argmin(errors[ell - 1]))])
    return AlphaSelection(
        ell=ell,
        alphas=quantile_levels(alpha_star, quantile_count),
        grid=tuple(float(a) for a in grid),
        errors=tuple(tuple(float(e) for e in row) for row in errors),
        alpha_star=alpha_star,
    )
