"""End-to-end training and testing, cross-validation, model files and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .classifier import FORMAT_VERSION, EnsembleConfig, TrainedModel, baseline_features, fit, predict_proba, roc_curve
from .dataset import LABELS, Cohort, ImageStack, Patient, read_manifest, split_train_test
from .screening import A3, PixelMask, estimate_mask, thresholds, union_mask, vectorize
from .selection import default_grid, scan_cohort, select_alphas
from .spectral import select_quantile_images, spike_basis

log = logging.getLogger(__name__)

FEATURE_KINDS = ("sml", "random_image", "mean_image")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class ModelFormatError(ValueError):
    pass


@dataclass
class RunConfig:
    train_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    grid_step: float = 0.02
    quantile_count: int = 9
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    seed: int = 0
    workers: int = 1
    restarts: int = 10
    gram_pixels: str = "A3"
    features: str = "sml"
    target_p: Optional[int] = None
    model_out: Optional[Path] = None
    report_out: Optional[Path] = None

    def __post_init__(self):
        if self.quantile_count not in (5, 9):
            raise ValueError(f"quantile_count must be 5 or 9, got {self.quantile_count}")
        if self.features not in FEATURE_KINDS:
            raise ValueError(f"features must be one of {FEATURE_KINDS}")
        if self.gram_pixels not in ("A3", "A2"):
            raise ValueError("gram_pixels must be 'A3' or 'A2'")

    def check_inputs(self) -> None:
        for path in (self.train_manifest, self.test_manifest):
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(path)


@dataclass
class PatientPrediction:
    patient_id: str
    score: Optional[float]
    predicted_label: Optional[str]
    error: Optional[str] = None


@dataclass
class EvalReport:
    predictions: list
    true_labels: list
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    auc: Optional[float]
    undiagnosed: int
    train_seconds: Optional[float] = None
    test_seconds: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictions"] = [
            {**asdict(pr), "true_label": t} for pr, t in zip(self.predictions, self.true_labels)
        ]
        del d["true_labels"]
        return d


def _ratio(a: int, b: int) -> float:
    return a / b if b else math.nan


def evaluate(predictions: Sequence[PatientPrediction], true_labels: Sequence[Optional[str]],
             train_seconds=None, test_seconds=None) -> EvalReport:
    """Confusion counts over diagnosed patients; abnormal is the positive class."""
    tp = tn = fp = fn = 0
    scores, ys = [], []
    for pr, truth in zip(predictions, true_labels):
        if pr.score is None or truth is None:
            continue
        pos_pred, pos_true = pr.predicted_label == "abnormal", truth == "abnormal"
        tp += pos_pred and pos_true
        tn += (not pos_pred) and (not pos_true)
        fp += pos_pred and not pos_true
        fn += (not pos_pred) and pos_true
        scores.append(pr.score)
        ys.append(int(pos_true))
    auc = roc_curve(scores, ys).auc if 0 < sum(ys) < len(ys) else None
    return EvalReport(
        predictions=list(predictions),
        true_labels=list(true_labels),
        tp=tp, tn=tn, fp=fp, fn=fn,
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        auc=auc,
        undiagnosed=sum(pr.score is None for pr in predictions),
        train_seconds=train_seconds,
        test_seconds=test_seconds,
    )


class _LoadClock:
    """Accumulates time spent loading stacks so it can be left out of phase timings."""

    def __init__(self):
        self.seconds = 0.0
        self._lock = threading.Lock()

    def load(self, pt: Patient) -> ImageStack:
        t0 = time.perf_counter()
        stack = pt.load()
        with self._lock:
            self.seconds += time.perf_counter() - t0
        return stack


class _ClockedPatient:
    def __init__(self, pt: Patient, clock: _LoadClock):
        self._pt, self._clock = pt, clock

    def load(self) -> ImageStack:
        return self._clock.load(self._pt)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def _patient_seed(seed: int, patient_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(patient_id.encode("utf-8"))]).generate_state(1)[0])


def _map(fn, items, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(fn, items))


def _sml_images(stack: ImageStack, ell: int, alphas) -> np.ndarray:
    """Quantile images of one scan at the chosen levels, as column-major vectors."""
    basis = spike_basis(stack)
    return vectorize(select_quantile_images(stack, basis, ell, alphas))


def _baseline_image(stack: ImageStack, kind: str, seed: int) -> np.ndarray:
    return vectorize(baseline_features(stack, kind, _patient_seed(seed, stack.patient_id)))


def train_pipeline(config: RunConfig, cohort: Optional[Cohort] = None):
    """Fit spectral selection, screening and the ensemble; returns (model, in-sample report)."""
    if cohort is None:
        config.check_inputs()
        cohort = read_manifest(config.train_manifest, config.target_p)
    _stage("input", cohort.check_trainable)
    y = cohort.y()
    clock = _LoadClock()
    patients = [_ClockedPatient(pt, clock) for pt in cohort.patients]
    t0 = time.perf_counter()

    selection = None
    if config.features == "sml":
        grid = default_grid(config.grid_step)
        bases, bank = _stage("spectral", scan_cohort, patients, grid, config.workers)
        selection = _stage("selection", select_alphas, cohort, bases, grid, config.quantile_count,
                           seed=config.seed, restarts=config.restarts, gram_pixels=config.gram_pixels,
                           bank=bank, workers=config.workers)
        del bank

        def quantiles(item):
            pt, basis = item
            stack = pt.load()
            return vectorize(select_quantile_images(stack, basis, selection.ell, selection.alphas)).astype(np.float32)

        images = _stage("features", _map, quantiles, list(zip(patients, bases)), config.workers)
        per_alpha = np.stack(images)  # (n, j, p*p)
        ybar = np.stack([q.astype(np.float64).mean(axis=0) for q in images])
        del images
        masks = []
        for a in range(per_alpha.shape[1]):
            masks.append(_stage("screening", estimate_mask, per_alpha[:, a, :].astype(np.float64), y))
        mask = union_mask(masks)
        del per_alpha
    else:
        feats = _stage("features", _map, lambda pt: _baseline_image(pt.load(), config.features, config.seed),
                       patients, config.workers)
        ybar = np.stack(feats)
        # baselines feed the raw image to the ensemble; screening belongs to the spectral path
        q = ybar.shape[1]
        side = int(round(math.sqrt(q)))
        t1, t2 = thresholds(len(y))
        mask = PixelMask(side, np.full(q, A3, dtype=np.int8), len(y), t1, t2)

    X = mask.select(ybar)
    if X.shape[1] == 0:
        raise PipelineError("screening", ValueError("no pixels survived screening"))
    ensemble = config.ensemble
    if X.shape[1] < ensemble.features_per_tree:
        log.warning("only %d pixels survived screening; sampling %d features per tree instead of %d",
                    X.shape[1], X.shape[1], ensemble.features_per_tree)
        ensemble = replace(ensemble, features_per_tree=X.shape[1])
    model = _stage("fit", fit, X, y, ensemble, config.workers)
    model = replace(model, mask=mask, selection=selection, preprocessing={
        "features": config.features,
        "normalization": "global-minmax",
        "seed": config.seed,
        "p": mask.p,
    })
    scores = predict_proba(model, X)
    train_seconds = max(0.0, time.perf_counter() - t0 - clock.seconds)
    preds = [PatientPrediction(pid, float(s), LABELS[int(s > 0.5)]) for pid, s in zip(cohort.ids, scores)]
    report = evaluate(preds, [pt.label for pt in cohort.patients], train_seconds=train_seconds)
    return model, report


def model_features(model: TrainedModel, stack: ImageStack) -> np.ndarray:
    """Masked feature vector of one scan, exactly as the model was trained."""
    mask = model.mask
    if mask is None:
        raise ValueError("model has no pixel mask")
    if stack.p != mask.p:
        raise ValueError(f"stack is {stack.p} x {stack.p} but the model expects {mask.p} x {mask.p}")
    kind = model.preprocessing.get("features", "sml")
    if kind == "sml":
        sel = model.selection
        image = _sml_images(stack, sel.ell, sel.alphas).mean(axis=0)
    else:
        image = _baseline_image(stack, kind, int(model.preprocessing.get("seed", 0)))
    return mask.select(image)


def predict_cohort(model: TrainedModel, patients: Sequence, workers: int = 1) -> list:
    """Score unlabelled scans; failures become undiagnosed records instead of aborting."""
    def features(pt):
        try:
            return model_features(model, pt.load()), None
        except Exception as exc:  # a bad scan must not sink the batch
            log.warning("patient %s undiagnosed: %s", pt.patient_id, exc)
            return None, f"{type(exc).__name__}: {exc}"

    patients = list(patients)
    extracted = _map(features, patients, workers)
    ok = [i for i, (x, _) in enumerate(extracted) if x is not None]
    scores = {}
    if ok:
        proba = np.atleast_1d(predict_proba(model, np.stack([extracted[i][0] for i in ok])))
        scores = dict(zip(ok, proba.tolist()))
    out = []
    for i, pt in enumerate(patients):
        if i in scores:
            out.append(PatientPrediction(pt.patient_id, scores[i], LABELS[int(scores[i] > 0.5)]))
        else:
            out.append(PatientPrediction(pt.patient_id, None, None, extracted[i][1]))
    return out


def test_pipeline(model: TrainedModel, test: Cohort, workers: int = 1) -> EvalReport:
    if len(test) == 0:
        raise ValueError("test cohort is empty")
    clock = _LoadClock()
    t0 = time.perf_counter()
    preds = predict_cohort(model, [_Unlabelled(pt, clock) for pt in test.patients], workers)
    test_seconds = max(0.0, time.perf_counter() - t0 - clock.seconds)
    return evaluate(preds, [pt.label for pt in test.patients], test_seconds=test_seconds)


class _Unlabelled:
    """A patient view without the label, handed to the prediction path."""

    def __init__(self, pt: Patient, clock: _LoadClock):
        self.patient_id = pt.patient_id
        self._pt, self._clock = pt, clock

    def load(self) -> ImageStack:
        return self._clock.load(self._pt)


_METRICS = ("accuracy", "sensitivity", "specificity", "auc")


def _summary(reports: Sequence[EvalReport]) -> dict:
    out = {}
    for key in _METRICS:
        vals = np.array([np.nan if getattr(r, key) is None else getattr(r, key) for r in reports], dtype=float)
        out[key] = {"mean": float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else None,
                    "std": float(np.nanstd(vals)) if np.any(~np.isnan(vals)) else None}
    return out


def cross_validate(config: RunConfig, repeats: int, cohort: Optional[Cohort] = None,
                   n_normal_train: int = 50, n_abnormal_train: int = 200,
                   baselines: Sequence[str] = ()) -> dict:
    """Repeated stratified random splits; every repeat retrains from scratch."""
    if cohort is None:
        config.check_inputs()
        cohort = read_manifest(config.train_manifest, config.target_p)
    kinds = [config.features] + [b for b in baselines if b != config.features]
    runs = {k: [] for k in kinds}
    splits = []
    for r in range(repeats):
        split_seed, run_seed = (int(s) for s in np.random.SeedSequence([config.seed, r]).generate_state(2))
        train, test = split_train_test(cohort, n_normal_train, n_abnormal_train, split_seed)
        splits.append({"repeat": r, "split_seed": split_seed, "run_seed": run_seed, "test_ids": test.ids})
        for kind in kinds:
            cfg = replace(config, features=kind, seed=run_seed,
                          ensemble=replace(config.ensemble, seed=run_seed))
            model, in_sample = train_pipeline(cfg, train)
            report = test_pipeline(model, test, config.workers)
            report.train_seconds = in_sample.train_seconds
            runs[kind].append((in_sample, report, model))
    result = {"repeats": repeats, "splits": splits}
    for kind, items in runs.items():
        result[kind] = {
            "out_of_sample": _summary([rep for _, rep, _ in items]),
            "in_sample_accuracy": _summary([ins for ins, _, _ in items])["accuracy"],
            "per_repeat": [
                {"accuracy": rep.accuracy, "sensitivity": rep.sensitivity, "specificity": rep.specificity,
                 "auc": rep.auc, "in_sample_accuracy": ins.accuracy,
                 "train_seconds": ins.train_seconds, "test_seconds": rep.test_seconds,
                 "ell": None if mdl.selection is None else mdl.selection.ell,
                 "alpha_star": None if mdl.selection is None else mdl.selection.alpha_star}
                for ins, rep, mdl in items
            ],
        }
    return result


# -- files ------------------------------------------------------------------------

def dumps_model(model: TrainedModel) -> str:
    return json.dumps(model.to_dict(), separators=(",", ":"), allow_nan=False) + "\n"


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> TrainedModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format_version {version!r}")
    try:
        model = TrainedModel.from_dict(data)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ModelFormatError(f"{path}: schema violation ({type(exc).__name__}: {exc})") from exc
    _check_model(model, path)
    return model


def _check_model(model: TrainedModel, path) -> None:
    q = model.n_features
    if model.mask is not None and len(model.mask.indices(A3)) != q:
        raise ModelFormatError(f"{path}: mask keeps {len(model.mask.indices(A3))} pixels but n_features={q}")
    for i, tree in enumerate(model.trees):
        split = tree.feature[tree.feature >= 0]
        if np.any(split >= q) or not np.all(np.isin(split, tree.features)):
            raise ModelFormatError(f"{path}: tree {i} splits on a feature outside its subset")
    kind = model.preprocessing.get("features", "sml")
    if kind == "sml" and model.mask is not None and model.selection is None:
        raise ModelFormatError(f"{path}: spectral model without a selection")


def write_predictions(predictions: Sequence[PatientPrediction], path,
                      true_labels: Optional[Sequence[Optional[str]]] = None) -> None:
    with_truth = true_labels is not None and any(t is not None for t in true_labels)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "score", "predicted_label"] + (["true_label"] if with_truth else []))
        for i, pr in enumerate(predictions):
            row = [pr.patient_id, "" if pr.score is None else repr(pr.score), pr.predicted_label or "undiagnosed"]
            if with_truth:
                row.append(true_labels[i] or "")
            writer.writerow(row)


def write_roc(curve, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, s in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow(["inf" if np.isinf(t) else repr(float(t)), repr(float(f)), repr(float(s))])


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def mask_stats(cohort: Cohort, alphas: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), ell: int = 2,
               workers: int = 1) -> list[tuple[float, float, float, float]]:
    """Percentage of pixels in A1/A2/A3 for the quantile images at each alpha."""
    cohort.check_trainable()
    y = cohort.y()
    grid = np.asarray(alphas, dtype=np.float64)
    _, bank = scan_cohort(cohort, grid, workers)
    rows = []
    for g, alpha in enumerate(grid):
        mask = estimate_mask(bank.matrix(ell, g), y)
        rows.append((float(alpha), *mask.percentages()))
    return rows
