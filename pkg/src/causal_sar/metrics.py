"""Accuracy reports, confusion matrices, feature discriminability and 2-D embeddings."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .model import CausalModel, predict

__all__ = [
    "EvalReport",
    "DiscriminabilityReport",
    "evaluate",
    "report_from_predictions",
    "format_accuracy",
    "discriminability",
    "pooled_features",
    "top_components",
    "project_2d",
    "export_embeddings",
]


def format_accuracy(percent: float) -> str:
    """Percent with three decimals, the way the result tables print it (``92.783``)."""
    return f"{percent:.3f}"


@dataclass
class EvalReport:
    accuracy: float  # percent, unrounded
    per_class: dict[str, float]
    confusion: np.ndarray  # rows = true class, cols = predicted
    n_eval: int
    predict_mode: str
    class_names: list[str]

    def to_dict(self) -> dict:
        return {
            "accuracy": round(self.accuracy, 3),
            "per_class": {k: (None if math.isnan(v) else round(v, 3)) for k, v in self.per_class.items()},
            "confusion": self.confusion.astype(int).tolist(),
            "n_eval": int(self.n_eval),
            "predict_mode": self.predict_mode,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name, *map(int, row)])

    def summary(self) -> str:
        lines = [f"accuracy {format_accuracy(self.accuracy)}%  ({self.n_eval} samples, {self.predict_mode})"]
        for name, acc in self.per_class.items():
            lines.append(f"  {name:>12s}  {format_accuracy(acc)}")
        return "\n".join(lines)


def report_from_predictions(pred, truth, class_names: Sequence[str], predict_mode: str = "interventional") -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if truth.size == 0:
        raise ValueError("cannot evaluate an empty split")
    if pred.shape != truth.shape:
        raise ValueError("predictions and labels differ in length")
    K = len(class_names)
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    row_tot = confusion.sum(axis=1)
    per_class = {
        name: (100.0 * confusion[k, k] / row_tot[k]) if row_tot[k] else float("nan")
        for k, name in enumerate(class_names)
    }
    acc = 100.0 * np.trace(confusion) / confusion.sum()
    return EvalReport(float(acc), per_class, confusion, int(truth.size), predict_mode, list(class_names))


def evaluate(model: CausalModel, ds: Dataset, predict_mode: str = "interventional", batch_size: int = 256) -> EvalReport:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty split")
    if ds.num_classes != model.num_classes:
        raise ValueError(f"model has {model.num_classes} classes, data has {ds.num_classes}")
    preds = []
    for s in range(0, len(ds), batch_size):
        preds.append(predict(model.forward(ds.images[s:s + batch_size]), predict_mode))
    return report_from_predictions(np.concatenate(preds), ds.labels, ds.class_names, predict_mode)


# ---------------------------------------------------------------- feature geometry


@dataclass
class DiscriminabilityReport:
    inter: float
    intra: float
    ratio: float  # inf when intra == 0
    space: str

    def to_dict(self) -> dict:
        return {"inter": self.inter, "intra": self.intra,
                "ratio": None if math.isinf(self.ratio) else self.ratio, "space": self.space}


def discriminability(features, labels, space: str = "baseline") -> DiscriminabilityReport:
    """Mean pairwise centroid distance over mean distance-to-own-centroid."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    if counts.min() < 2:
        raise ValueError(f"class {classes[counts.argmin()]} has a single sample")
    centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
    diffs = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1))
    iu = np.triu_indices(classes.size, k=1)
    inter = float(dist[iu].mean())
    own = centroids[np.searchsorted(classes, y)]
    intra = float(np.sqrt(((X - own) ** 2).sum(-1)).mean())
    ratio = inter / intra if intra > 0 else math.inf
    return DiscriminabilityReport(inter, intra, ratio, space)


def pooled_features(model: CausalModel, ds: Dataset, space: str = "baseline", batch_size: int = 256) -> np.ndarray:
    """Stratum-mean of F (``baseline``) or of F*A (``interventional``), one row per sample."""
    out = []
    for s in range(0, len(ds), batch_size):
        x = ds.images[s:s + batch_size]
        F = model.extract_semantics(x)
        if space == "interventional":
            F = ad.mul(F, model.activate(x))
        elif space != "baseline":
            raise ValueError(f"unknown feature space {space!r}")
        out.append(F.values.mean(axis=1))
    return np.concatenate(out).astype(np.float64)


def _power_iteration(C: np.ndarray, start: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000):
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        if w @ v < 0:  # keep a consistent orientation between iterations
            w = -w
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    lam = float(v @ C @ v)
    return lam, v


def top_components(features, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs of the feature covariance by power iteration with deflation."""
    X = np.asarray(features, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(len(X) - 1, 1)
    d = C.shape[0]
    # fixed, generic start vector keeps the projection deterministic
    start = np.cos(np.arange(1, d + 1) * 1.2345) + 0.5
    vals, vecs = [], []
    work = C.copy()
    for _ in range(min(k, d)):
        lam, v = _power_iteration(work, start)
        big = np.argmax(np.abs(v))
        if v[big] < 0:
            v = -v
        vals.append(lam)
        vecs.append(v)
        work = work - lam * np.outer(v, v)
    while len(vecs) < k:  # fewer feature dims than requested components
        vals.append(0.0)
        vecs.append(np.zeros(d))
    return np.array(vals), np.stack(vecs, axis=1)


def project_2d(features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("need at least 3 samples of vector features")
    Xc = X - X.mean(axis=0)
    if not np.any(np.abs(Xc) > 0):
        raise ValueError("features have rank 0 (all samples identical)")
    _, vecs = top_components(X, 2)
    return Xc @ vecs


def export_embeddings(features, labels, path) -> np.ndarray:
    """Write ``x,y,label`` rows of the top-2 principal-component projection."""
    Y = project_2d(features)
    labels = np.asarray(labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (a, b), lab in zip(Y, labels):
            w.writerow([repr(float(a)), repr(float(b)), lab])
    return Y
