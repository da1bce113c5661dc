"""Per-scan spike eigenvectors and quantile-image selection."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .dataset import ImageStack

RANK_TOL = 1e-12
FLAT_TOL = 1e-12


class EigenConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"eigensolver did not converge in {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class DegenerateVectorError(ValueError):
    pass


class DegenerateSpectrumWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class SpikeBasis:
    """Top eigenpairs of one scan's Gram matrix.

    ``eigenvectors[l]`` is sign-normalized and ``sort_orders[l]`` lists slice indices that
    sort it ascending. ``rank_deficient`` flags a numerically zero second eigenvalue.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    signs: np.ndarray
    sort_orders: np.ndarray
    rank_deficient: bool

    @property
    def m(self) -> int:
        return self.eigenvectors.shape[1]

    def sorted_vector(self, ell: int) -> np.ndarray:
        return self.eigenvectors[ell - 1][self.sort_orders[ell - 1]]


def _as_vectors(stack: Union[ImageStack, np.ndarray]) -> np.ndarray:
    if isinstance(stack, ImageStack):
        return stack.vectors()
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim == 3:
        return arr.transpose(0, 2, 1).reshape(arr.shape[0], -1)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected an ImageStack, (m, p, p) or (m, d) array, got shape {arr.shape}")


def gram_matrix(stack: Union[ImageStack, np.ndarray]) -> np.ndarray:
    """Uncentered inner products of the vectorized slices, s_ij = vec(X_i) . vec(X_j)."""
    V = _as_vectors(stack)
    if V.shape[0] < 2:
        raise ValueError("need at least 2 slices")
    S = V @ V.T
    upper = np.triu(S)
    return upper + np.triu(S, 1).T


def top_eigenpairs(S: np.ndarray, k: int = 2, tol: float = 1e-10, max_iter: int | None = None,
                   extra: int = 8, seed: int = 0):
    """Largest ``k`` eigenpairs of a symmetric matrix by block subspace iteration.

    Each sweep multiplies an orthonormal block of ``k + extra`` columns by ``S`` and
    performs a Rayleigh-Ritz projection. Stops once every wanted Ritz pair satisfies
    ||S v - lam v|| <= tol * ||S||_F; raises EigenConvergenceError after ``max_iter``
    sweeps (default 10 * m).

    Returns (eigenvalues descending, eigenvectors as columns).
    """
    S = np.asarray(S, dtype=np.float64)
    m = S.shape[0]
    if S.shape != (m, m):
        raise ValueError("S must be square")
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    max_iter = 10 * m if max_iter is None else max_iter
    norm = float(np.linalg.norm(S))
    if norm == 0.0:
        return np.zeros(k), np.eye(m)[:, :k]

    b = min(m, k + extra)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((m, b)))
    worst = math.inf
    for it in range(1, max_iter + 1):
        Q, _ = np.linalg.qr(S @ Q)
        SQ = S @ Q
        H = Q.T @ SQ
        w, U = np.linalg.eigh((H + H.T) / 2)
        order = np.argsort(w)[::-1]
        w, U = w[order], U[:, order]
        Q = Q @ U
        SQ = SQ @ U
        resid = np.linalg.norm(SQ[:, :k] - Q[:, :k] * w[:k], axis=0)
        worst = float(resid.max()) / norm
        if worst <= tol:
            return w[:k].copy(), Q[:, :k].copy()
    raise EigenConvergenceError(worst, max_iter)


def curve_area(v: np.ndarray) -> float:
    """Area under the min-max rescaled polyline of ``v`` minus 1/2.

    Computed so that curve_area(-v) == -curve_area(v) exactly.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        raise DegenerateVectorError("need at least 2 entries")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        raise DegenerateVectorError("constant vector has no orientation")
    c = (v - (lo + hi) / 2) / (hi - lo)
    terms = list(c[1:-1]) + [c[0] / 2, c[-1] / 2]
    return math.fsum(terms) / (v.size - 1)


def curve_auc(v: np.ndarray) -> float:
    return 0.5 + curve_area(v)


def normalize_sign(v: np.ndarray):
    """Orient an eigenvector so its rescaled curve has area above 1/2.

    Returns (oriented vector, sign). An area of exactly 1/2 keeps the orientation whose
    first nonzero entry of ``v - v[::-1]`` (else of ``v - mean``) is positive, which makes
    the result identical for v and -v; an increasing ramp therefore gets sign -1.
    """
    v = np.asarray(v, dtype=np.float64)
    area = curve_area(v)
    if area > 0:
        sign = 1
    elif area < 0:
        sign = -1
    else:
        diff = v - v[::-1]
        nz = np.flatnonzero(diff)
        if nz.size == 0:
            diff = v - v.mean()
            nz = np.flatnonzero(diff)
        sign = 1 if diff[nz[0]] > 0 else -1
    return (v if sign == 1 else -v), sign


def spike_basis(stack: Union[ImageStack, np.ndarray], n_vectors: int = 2, **eig_kwargs) -> SpikeBasis:
    S = gram_matrix(stack)
    m = S.shape[0]
    k = min(n_vectors, m)
    w, V = top_eigenpairs(S, k, **eig_kwargs)
    rank_deficient = bool(k < 2 or w[1] <= RANK_TOL * max(w[0], 0.0))
    vecs, signs, orders = [], [], []
    for j in range(k):
        v = V[:, j]
        if v.max() - v.min() <= FLAT_TOL:
            # identical slices: any orientation is equivalent
            v = -v if v.sum() < 0 else v.copy()
            sign = 1
        else:
            v, sign = normalize_sign(v)
        vecs.append(v)
        signs.append(sign)
        orders.append(np.argsort(v, kind="stable"))
    return SpikeBasis(np.asarray(w), np.vstack(vecs), np.asarray(signs), np.vstack(orders),
                      rank_deficient)


def quantile_position(m: int, alpha: float) -> int:
    """0-based nearest-rank position of the alpha-quantile among m sorted values."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return int(math.floor(alpha * (m - 1) + 0.5))


def _effective_ell(basis: SpikeBasis, ell: int) -> int:
    if ell not in (1, 2):
        raise ValueError(f"ell must be 1 or 2, got {ell}")
    if ell == 2 and (basis.rank_deficient or basis.eigenvectors.shape[0] < 2):
        warnings.warn("second eigenvalue is numerically zero; using the first spike eigenvector",
                      DegenerateSpectrumWarning, stacklevel=3)
        return 1
    return ell


def _quantile_index(basis: SpikeBasis, ell: int, alpha: float) -> int:
    v = basis.eigenvectors[ell - 1]
    target = v[basis.sort_orders[ell - 1][quantile_position(v.size, alpha)]]
    return int(np.argmin(np.abs(v - target)))


def quantile_index(basis: SpikeBasis, ell: int, alpha: float) -> int:
    """Slice whose eigenvector entry is nearest the alpha-quantile; ties go to the lowest index."""
    return _quantile_index(basis, _effective_ell(basis, ell), alpha)


def quantile_indices(basis: SpikeBasis, ell: int, alphas: Sequence[float]) -> np.ndarray:
    ell = _effective_ell(basis, ell)
    return np.array([_quantile_index(basis, ell, a) for a in alphas], dtype=np.int64)


def select_quantile_images(stack: ImageStack, basis: SpikeBasis, ell: int,
                           alphas: Sequence[float]) -> np.ndarray:
    """Quantile images for each alpha, shape (len(alphas), p, p); repeats are kept."""
    if len(alphas) == 0:
        raise ValueError("alphas must be non-empty")
    if basis.m != stack.m:
        raise ValueError(f"basis has {basis.m} entries but stack has {stack.m} slices")
    return stack.slices[quantile_indices(basis, ell, alphas)]


def mean_image(slices) -> np.ndarray:
    arr = np.asarray(slices, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError("mean_image needs a non-empty list of p x p slices")
    return arr.mean(axis=0)
