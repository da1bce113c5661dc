"""Boosted trees with per-tree random feature subsets, a bagged forest mode, ROC/AUC and baselines."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .dataset import ImageStack
from .screening import PixelMask
from .selection import AlphaSelection

FORMAT_VERSION = "sml-model-v1"
HESS_FLOOR = 1e-12
MAX_HALVINGS = 60


@dataclass(frozen=True)
class EnsembleConfig:
    n_trees: int = 1000
    features_per_tree: int = 20
    max_depth: int = 3
    learning_rate: float = 0.1
    mode: str = "gbrf"
    seed: int = 0
    feature_sampling: str = "tree"

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.features_per_tree < 1:
            raise ValueError("features_per_tree must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.mode not in ("gbrf", "rf"):
            raise ValueError(f"mode must be 'gbrf' or 'rf', got {self.mode!r}")
        if self.feature_sampling not in ("tree", "split"):
            raise ValueError("feature_sampling must be 'tree' or 'split'")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree in preorder. Leaves have feature == -1; rows go left when x <= threshold."""

    features: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                nodes.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                              "left": int(self.left[i]), "right": int(self.right[i]), "leaf_value": None})
            else:
                nodes.append({"feature": None, "threshold": None, "left": None, "right": None,
                              "leaf_value": float(self.value[i])})
        return {"features": [int(f) for f in self.features], "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        nodes = d["nodes"]
        if not nodes:
            raise ValueError("tree without nodes")
        feature = np.array([-1 if nd["feature"] is None else int(nd["feature"]) for nd in nodes], dtype=np.int64)
        threshold = np.array([0.0 if nd["threshold"] is None else float(nd["threshold"]) for nd in nodes])
        left = np.array([-1 if nd["left"] is None else int(nd["left"]) for nd in nodes], dtype=np.int64)
        right = np.array([-1 if nd["right"] is None else int(nd["right"]) for nd in nodes], dtype=np.int64)
        value = np.array([0.0 if nd["leaf_value"] is None else float(nd["leaf_value"]) for nd in nodes])
        internal = feature >= 0
        n = len(nodes)
        if np.any(internal & ((left <= 0) | (left >= n) | (right <= 0) | (right >= n))):
            raise ValueError("child index out of range")
        return cls(np.array(d["features"], dtype=np.int64), feature, threshold, left, right, value)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    trees: list
    base_score: float
    config: EnsembleConfig
    n_features: int
    mask: Optional[PixelMask] = None
    selection: Optional[AlphaSelection] = None
    preprocessing: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "mask": None if self.mask is None else self.mask.to_dict(),
            "selection": None if self.selection is None else self.selection.to_dict(),
            "preprocessing": self.preprocessing,
            "base_score": self.base_score,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            base_score=float(d["base_score"]),
            config=EnsembleConfig(**d["config"]),
            n_features=int(d["n_features"]),
            mask=None if d.get("mask") is None else PixelMask.from_dict(d["mask"]),
            selection=None if d.get("selection") is None else AlphaSelection.from_dict(d["selection"]),
            preprocessing=dict(d.get("preprocessing") or {}),
            format_version=d["format_version"],
        )


# -- tree growing -----------------------------------------------------------------

def _best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Exact split search over midpoints of consecutive distinct values.

    Gain is G_L^2/H_L + G_R^2/H_R - G^2/H; ties go to the lower column, then the lower threshold.
    """
    if rows.size < 2:
        return None
    Xs = X[np.ix_(rows, cols)]
    order = np.argsort(Xs, axis=0, kind="stable")
    xs = np.take_along_axis(Xs, order, axis=0)
    gs, hs = g[rows][order], h[rows][order]
    GL = np.cumsum(gs, axis=0)[:-1]
    HL = np.cumsum(hs, axis=0)[:-1]
    G, H = gs.sum(axis=0), hs.sum(axis=0)
    GR, HR = G - GL, H - HL
    gain = (GL ** 2 / np.maximum(HL, HESS_FLOOR) + GR ** 2 / np.maximum(HR, HESS_FLOOR)
            - G ** 2 / np.maximum(H, HESS_FLOOR))
    valid = xs[1:] > xs[:-1]
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain.T.ravel()))
    j, pos = divmod(flat, gain.shape[0])
    lo, hi = xs[pos, j], xs[pos + 1, j]
    thr = lo + (hi - lo) / 2
    if not lo <= thr < hi:
        thr = lo
    return int(cols[j]), float(thr)


def _grow_tree(X, g, h, rows, cols, max_depth, rng=None, per_split=0) -> tuple[Tree, list]:
    """Grow a depth-limited tree; leaf values are Newton steps -G/H.

    With ``per_split`` > 0 each node draws its own ``per_split`` columns from ``cols``.
    Returns the tree and, per node, the training rows that reached it.
    """
    feature, threshold, left, right, value, members = [], [], [], [], [], []
    used = set()

    def build(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-g[idx].sum() / max(h[idx].sum(), HESS_FLOOR))
        members.append(idx)
        if depth >= max_depth:
            return node
        cand = cols
        if per_split:
            cand = np.sort(rng.choice(cols, size=min(per_split, cols.size), replace=False))
        split = _best_split(X, g, h, idx, cand)
        if split is None:
            return node
        f, thr = split
        used.add(f)
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = build(idx[go_left], depth + 1)
        right[node] = build(idx[~go_left], depth + 1)
        return node

    build(np.asarray(rows), 0)
    feats = np.array(sorted(used), dtype=np.int64) if per_split else np.asarray(cols, dtype=np.int64)
    tree = Tree(feats, np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value))
    return tree, members


def _logloss_terms(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, F) - y * F


def log_loss(F: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(_logloss_terms(F, y)))


def _safeguard_leaves(tree: Tree, members: list, F: np.ndarray, y: np.ndarray, lr: float) -> None:
    """Scale each leaf's Newton step by ``lr`` and halve it until the leaf's loss does not rise."""
    for node in np.flatnonzero(tree.feature < 0):
        idx = members[node]
        step = lr * tree.value[node]
        before = _logloss_terms(F[idx], y[idx]).sum()
        for _ in range(MAX_HALVINGS):
            if _logloss_terms(F[idx] + step, y[idx]).sum() <= before:
                break
            step /= 2
        else:
            step = 0.0
        tree.value[node] = step


def _sample_columns(rng: np.random.Generator, q: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(q, size=k, replace=False))


def _fit_gbrf(X, y, config: EnsembleConfig):
    n, q = X.shape
    rng = np.random.default_rng(config.seed)
    prior = y.mean()
    base = float(np.log(prior / (1.0 - prior)))
    F = np.full(n, base)
    rows = np.arange(n)
    per_split = config.features_per_tree if config.feature_sampling == "split" else 0
    trees = []
    for _ in range(config.n_trees):
        prob = 1.0 / (1.0 + np.exp(-F))
        g, h = prob - y, prob * (1.0 - prob)
        cols = np.arange(q) if per_split else _sample_columns(rng, q, config.features_per_tree)
        tree, members = _grow_tree(X, g, h, rows, cols, config.max_depth, rng, per_split)
        _safeguard_leaves(tree, members, F, y, config.learning_rate)
        F = F + tree.predict(X)
        trees.append(tree)
    return trees, base


def _fit_rf(X, y, config: EnsembleConfig, workers: int):
    n, q = X.shape
    per_split = config.features_per_tree if config.feature_sampling == "split" else 0

    def one(t: int) -> Tree:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, t]))
        rows = rng.integers(0, n, size=n)
        cols = np.arange(q) if per_split else _sample_columns(rng, q, config.features_per_tree)
        # squared loss on 0/1 targets: leaf value is the class-1 fraction
        tree, _ = _grow_tree(X, -y, np.ones(n), rows, cols, config.max_depth, rng, per_split)
        return tree

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        trees = list(pool.map(one, range(config.n_trees)))
    return trees, 0.0


def fit(X: np.ndarray, y, config: EnsembleConfig = EnsembleConfig(), workers: int = 1) -> TrainedModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"X must be (n, q) with one label per row, got {X.shape} and {y.shape}")
    if X.shape[0] < 2 or len(np.unique(y)) != 2 or not np.all((y == 0) | (y == 1)):
        raise ValueError("fit needs binary 0/1 labels with both classes present")
    if X.shape[1] < config.features_per_tree:
        raise ValueError(f"only {X.shape[1]} features available, features_per_tree={config.features_per_tree}")
    if config.mode == "gbrf":
        trees, base = _fit_gbrf(X, y, config)
    else:
        trees, base = _fit_rf(X, y, config, workers)
    return TrainedModel(trees=trees, base_score=base, config=config, n_features=X.shape[1])


def _as_batch(model: TrainedModel, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    return X, single


def decision_function(model: TrainedModel, x) -> np.ndarray:
    X, single = _as_batch(model, x)
    F = np.full(len(X), model.base_score)
    for tree in model.trees:
        F += tree.predict(X)
    return F[0] if single else F


def predict_proba(model: TrainedModel, x):
    """P(abnormal): logistic of the summed leaf scores (gbrf) or the fraction of votes (rf)."""
    X, single = _as_batch(model, x)
    if model.config.mode == "rf":
        if not model.trees:
            out = np.full(len(X), 0.5)
        else:
            votes = sum((tree.predict(X) > 0.5).astype(np.float64) for tree in model.trees)
            out = votes / len(model.trees)
    else:
        out = 1.0 / (1.0 + np.exp(-decision_function(model, X)))
    return float(out[0]) if single else out


def predict(model: TrainedModel, x):
    return np.asarray(predict_proba(model, x)) > 0.5


def staged_log_loss(model: TrainedModel, X: np.ndarray, y) -> np.ndarray:
    """Training log-loss after the base score and after each boosting stage."""
    X, _ = _as_batch(model, X)
    y = np.asarray(y, dtype=np.float64)
    F = np.full(len(X), model.base_score)
    losses = [log_loss(F, y)]
    for tree in model.trees:
        F = F + tree.predict(X)
        losses.append(log_loss(F, y))
    return np.array(losses)


# -- evaluation -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    """ROC over the unique scores, highest first; a threshold t flags scores >= t.

    The first point is (0, 0) at threshold +inf; tied scores move both rates in one step,
    so the trapezoidal AUC equals the concordant-pair fraction with ties counted as 1/2.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(pos_sorted)[last_of_group]
    fp = np.cumsum(~pos_sorted)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(thresholds, tpr, fpr, auc)


def baseline_features(stack: Union[ImageStack, np.ndarray], kind: str, seed: int = 0) -> np.ndarray:
    """One p x p image per patient: a uniformly drawn slice or the mean of all slices."""
    slices = stack.slices if isinstance(stack, ImageStack) else np.asarray(stack, dtype=np.float64)
    if slices.ndim != 3 or slices.shape[0] < 1:
        raise ValueError("need a stack of at least one slice")
    if kind == "random_image":
        return slices[int(np.random.default_rng(seed).integers(slices.shape[0]))].copy()
    if kind == "mean_image":
        return slices.mean(axis=0)
    raise ValueError(f"kind must be 'random_image' or 'mean_image', got {kind!r}")
