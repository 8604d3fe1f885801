"""Cross-validation protocols, pooled metrics and parameter sweeps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import DatasetManifest

log = logging.getLogger(__name__)

# fit_predict(train_idx, test_idx, fold) -> (predicted labels for test_idx, fold statistics)
FitPredict = Callable[[np.ndarray, np.ndarray, int], Tuple[np.ndarray, Dict]]


@dataclass
class FoldPlan:
    protocol: str
    folds: List[Tuple[np.ndarray, np.ndarray]]  # (train indices, test indices)
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.folds)

    def validate(self, subjects: Optional[Sequence[str]] = None) -> None:
        for k, (tr, te) in enumerate(self.folds):
            if len(te) == 0 or len(tr) == 0:
                raise ValueError(f"fold {k} has an empty side")
            if np.intersect1d(tr, te).size:
                raise ValueError(f"fold {k}: train and test share sequences")
            if subjects is not None and self.protocol == "loso":
                s_tr = {subjects[i] for i in tr}
                s_te = {subjects[i] for i in te}
                if s_tr & s_te:
                    raise ValueError(f"fold {k}: subjects {sorted(s_tr & s_te)} on both sides")


def _subjects(data) -> List[str]:
    if isinstance(data, DatasetManifest):
        return [e.subject_id for e in data.entries]
    return [str(s) for s in data]


def split_loso(data) -> FoldPlan:
    """One fold per subject (first-appearance order); ``data`` is a manifest or subject list."""
    subjects = _subjects(data)
    order = list(dict.fromkeys(subjects))
    if len(order) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 distinct subjects")
    subj = np.array(subjects)
    folds = [(np.flatnonzero(subj != s), np.flatnonzero(subj == s)) for s in order]
    return FoldPlan("loso", folds)


def split_lovo(data, test_fraction: float = 0.05, seed: int = 0, literal: bool = False) -> FoldPlan:
    """Shuffled holdouts covering every sequence once.

    The sequences are partitioned into ``ceil(1 / test_fraction)`` groups
    (20 at the default 5%); each group is the test side of one fold. With
    ``literal=True`` every sequence forms its own fold.
    """
    n = len(data) if not isinstance(data, int) else data
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if n < 2:
        raise ValueError("a held-out split needs at least 2 sequences")
    if literal:
        groups = [np.array([i]) for i in range(n)]
    else:
        if not 0 < test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        k = min(math.ceil(1.0 / test_fraction - 1e-9), n)
        perm = np.random.default_rng(seed).permutation(n)
        groups = [np.sort(g) for g in np.array_split(perm, k)]
    allidx = np.arange(n)
    folds = [(np.setdiff1d(allidx, g), g) for g in groups]
    return FoldPlan("lovo", folds, seed)


# metrics --------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def micro_metrics(cm: np.ndarray) -> Dict[str, float]:
    """Accuracy and micro-averaged precision, recall and F1 from pooled counts."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    n = cm.sum()
    P = tp.sum() / (tp.sum() + fp.sum()) if (tp.sum() + fp.sum()) else 0.0
    R = tp.sum() / (tp.sum() + fn.sum()) if (tp.sum() + fn.sum()) else 0.0
    F = 2 * P * R / (P + R) if (P + R) else 0.0
    return {"accuracy": float(tp.sum() / n) if n else 0.0, "precision": float(P),
            "recall": float(R), "f1": float(F)}


@dataclass
class FoldResult:
    fold: int
    test_idx: np.ndarray
    y_true: np.ndarray
    y_pred: Optional[np.ndarray]
    stats: Dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def metrics(self, n_classes: int) -> Dict[str, float]:
        if not self.ok:
            return {"accuracy": float("nan"), "f1": float("nan")}
        return micro_metrics(confusion_matrix(self.y_true, self.y_pred, n_classes))

    def to_dict(self, n_classes: int) -> Dict:
        d = {"fold": self.fold, "n_test": int(len(self.test_idx)),
             "test_idx": [int(i) for i in self.test_idx]}
        if self.ok:
            m = self.metrics(n_classes)
            d.update(acc=m["accuracy"], f1=m["f1"], y_true=[int(v) for v in self.y_true],
                     y_pred=[int(v) for v in self.y_pred])
        else:
            d.update(acc=None, f1=None, error=self.error)
        if self.stats:
            d["stats"] = _jsonable(self.stats)
        return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class MetricsReport:
    protocol: str
    n_classes: int
    folds: List[FoldResult]
    config_hash: str = ""
    extra: Dict = field(default_factory=dict)

    @property
    def confusion(self) -> np.ndarray:
        cm = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        for f in self.folds:
            if f.ok:
                cm += confusion_matrix(f.y_true, f.y_pred, self.n_classes)
        return cm

    @property
    def metrics(self) -> Dict[str, float]:
        return micro_metrics(self.confusion)

    @property
    def accuracy(self) -> float:
        return self.metrics["accuracy"]

    @property
    def f1(self) -> float:
        return self.metrics["f1"]

    @property
    def failed_folds(self) -> List[int]:
        return [f.fold for f in self.folds if not f.ok]

    def to_dict(self) -> Dict:
        cm = self.confusion
        tp = np.diag(cm)
        m = micro_metrics(cm)
        out = {
            "protocol": self.protocol,
            "folds": [f.to_dict(self.n_classes) for f in self.folds],
            "accuracy": m["accuracy"],
            "precision": m["precision"],
            "recall": m["recall"],
            "f1": m["f1"],
            "confusion_matrix": cm.tolist(),
            "per_class": {"tp": tp.tolist(), "fp": (cm.sum(axis=0) - tp).tolist(),
                          "fn": (cm.sum(axis=1) - tp).tolist()},
            "n_classes": self.n_classes,
            "failed_folds": self.failed_folds,
            "config_hash": self.config_hash,
        }
        if self.extra:
            out["extra"] = _jsonable(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: Dict) -> "MetricsReport":
        folds = []
        for f in d["folds"]:
            ok = f.get("error") is None
            folds.append(FoldResult(
                fold=f["fold"], test_idx=np.asarray(f.get("test_idx", []), dtype=int),
                y_true=np.asarray(f.get("y_true", []), dtype=int),
                y_pred=np.asarray(f["y_pred"], dtype=int) if ok else None,
                stats=f.get("stats", {}), error=f.get("error")))
        return cls(d["protocol"], d["n_classes"], folds, d.get("config_hash", ""), d.get("extra", {}))

    def write_fold_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "acc", "f1", "n_test"])
            for f in self.folds:
                m = f.metrics(self.n_classes)
                w.writerow([f.fold, repr(m["accuracy"]), repr(m["f1"]), len(f.test_idx)])
        return path


# drivers --------------------------------------------------------------------------


def _run_fold(fit_predict: FitPredict, labels: np.ndarray, k: int, tr, te) -> FoldResult:
    tr, te = np.asarray(tr), np.asarray(te)
    try:
        pred, stats = fit_predict(tr, te, k)
        pred = np.asarray(pred, dtype=int)
        if pred.shape != (len(te),):
            raise ValueError(f"fold {k}: {pred.shape[0]} predictions for {len(te)} test sequences")
        result = FoldResult(k, te, labels[te], pred, stats or {})
    except Exception as exc:  # noqa: BLE001 -- recorded, not swallowed
        log.error("fold %d failed: %s", k, exc)
        result = FoldResult(k, te, labels[te], None, {}, f"{type(exc).__name__}: {exc}")
    log.info("fold %d done", k)
    return result


_WORKER_FN: Optional[FitPredict] = None


def _worker(labels, k, tr, te) -> FoldResult:
    return _run_fold(_WORKER_FN, labels, k, tr, te)


def evaluate(plan: FoldPlan, labels, fit_predict: FitPredict, n_classes: Optional[int] = None,
             config_hash: str = "", folds: Optional[Sequence[int]] = None, jobs: int = 1) -> MetricsReport:
    """Run ``fit_predict`` on every fold and pool the confusion counts.

    An exception inside a fold is recorded as that fold's failure entry; the
    remaining folds still run and the pooled metrics cover the folds that
    completed. With ``jobs > 1`` folds run in forked worker processes; every
    fold is seeded independently, so the report does not depend on ``jobs``.
    """
    global _WORKER_FN
    labels = np.asarray(labels, dtype=int)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    todo = [(k, tr, te) for k, (tr, te) in enumerate(plan.folds) if folds is None or k in folds]
    if jobs > 1 and len(todo) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        _WORKER_FN = fit_predict  # inherited by the forked workers
        try:
            with ProcessPoolExecutor(min(jobs, len(todo)), mp_context=mp.get_context("fork")) as ex:
                futures = [ex.submit(_worker, labels, k, tr, te) for k, tr, te in todo]
                results = [f.result() for f in futures]
        finally:
            _WORKER_FN = None
    else:
        results = [_run_fold(fit_predict, labels, k, tr, te) for k, tr, te in todo]
    return MetricsReport(plan.protocol, n_classes, results, config_hash)


SWEEP_ALIASES = {"p": "mask.p", "M": "model.feature_maps", "m": "model.feature_maps",
                 "rcl_depth": "model.recurrences", "rcl_count": "model.rcl_count"}


def sweep_key(param: str) -> str:
    return SWEEP_ALIASES.get(param, param)


def sweep(param: str, values: Sequence, run: Callable[[str, object], MetricsReport],
          csv_path=None) -> List[Tuple[object, MetricsReport]]:
    """Evaluate once per value; ``run(key, value)`` returns that value's report."""
    if not len(values):
        raise ValueError("sweep needs at least one value")
    key = sweep_key(param)
    rows = [(v, run(key, v)) for v in values]
    if csv_path is not None:
        write_sweep_csv(param, rows, csv_path)
    return rows


def write_sweep_csv(param: str, rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "accuracy", "f1", "n_folds", "failed_folds", "config_hash"])
        for v, rep in rows:
            w.writerow([v, repr(rep.accuracy), repr(rep.f1), len(rep.folds), len(rep.failed_folds),
                        rep.config_hash])
    return path
