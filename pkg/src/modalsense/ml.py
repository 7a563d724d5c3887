"""KNN recognition/regression and the cross-validation harness.

Neighbour selection is order-free: candidates are ranked by distance, then
by label (classification) or target value (regression), so permuting the
training set never changes a prediction.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,) str for classification, float (mm) for regression
    groups: np.ndarray  # (N,) recording ids; windows of a recording share one
    band: np.ndarray | None = None
    config_hashes: np.ndarray | None = None
    scenarios: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.groups = np.asarray(self.groups)
        if self.features.ndim != 2 or not (len(self.features) == len(self.labels) == len(self.groups)):
            raise DatasetError(f"inconsistent dataset shapes: features {self.features.shape}, "
                               f"labels {self.labels.shape}, groups {self.groups.shape}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        pick = (lambda a: None if a is None else a[idx])
        return Dataset(self.features[idx], self.labels[idx], self.groups[idx], self.band,
                       pick(self.config_hashes), pick(self.scenarios))


def _neighbours(train_X, query, k, tiebreak):
    if len(train_X) == 0:
        raise DatasetError("empty training set")
    if not 1 <= k <= len(train_X):
        raise DatasetError(f"k={k} must be between 1 and the training size {len(train_X)}")
    d = np.sqrt(((train_X - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    order = np.lexsort((tiebreak, d))
    return order[:k], d[order[:k]]


def knn_classify(train: Dataset, query, k: int = 3):
    """Majority vote of the k nearest; ties go to the smaller summed distance, then the lower label.

    Returns ``(label, neighbour_distances)``.
    """
    labels = train.labels.astype(str)
    idx, dist = _neighbours(train.features, query, k, labels)
    votes = {}
    for lab, dd in zip(labels[idx], dist):
        count, total = votes.get(lab, (0, 0.0))
        votes[lab] = (count + 1, total + dd)
    best = min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], lab))
    return best, dist


def knn_regress(train: Dataset, query, k: int = 3) -> float:
    """Unweighted mean target of the k nearest."""
    y = train.labels.astype(np.float64)
    idx, _ = _neighbours(train.features, query, k, y)
    return float(y[idx].mean())


def _group_table(dataset, labelled):
    uniq, first = np.unique(dataset.groups.astype(str), return_index=True)
    if not labelled:
        return {"": list(uniq)}
    table = {}
    labels = dataset.labels.astype(str)
    for g, i in zip(uniq, first):
        table.setdefault(labels[i], []).append(g)
    return table


def _assign(table, folds, seed):
    rng = np.random.default_rng(seed)
    fold_of, slot = {}, 0
    for key in sorted(table):
        groups = sorted(table[key])
        for j in rng.permutation(len(groups)):
            fold_of[groups[j]] = slot % folds
            slot += 1
    return fold_of


def _splits(dataset, fold_of, folds):
    gf = np.array([fold_of[g] for g in dataset.groups.astype(str)])
    return [(np.flatnonzero(gf != f), np.flatnonzero(gf == f)) for f in range(folds)]


def stratified_kfold(dataset: Dataset, folds: int = 5, seed: int = 0):
    """Group-aware stratified folds as a list of (train_idx, test_idx).

    Whole recordings are dealt to folds class by class in a seeded order, so
    per-fold class counts (in recordings) differ by at most one.
    """
    if folds < 2:
        raise DatasetError(f"need at least 2 folds, got {folds}")
    labels = dataset.labels.astype(str)
    for g in np.unique(dataset.groups.astype(str)):
        if len(set(labels[dataset.groups.astype(str) == g])) > 1:
            raise DatasetError(f"group {g!r} mixes labels")
    table = _group_table(dataset, labelled=True)
    small = {lab: len(g) for lab, g in table.items() if len(g) < folds}
    if small:
        raise DatasetError(f"classes with fewer recordings than folds ({folds}): {small}")
    return _splits(dataset, _assign(table, folds, seed), folds)


def group_kfold(dataset: Dataset, folds: int = 3, seed: int = 0):
    """Seeded K-fold over recordings (no stratification), for regression."""
    if folds < 2:
        raise DatasetError(f"need at least 2 folds, got {folds}")
    table = _group_table(dataset, labelled=False)
    if len(table[""]) < folds:
        raise DatasetError(f"{len(table[''])} recordings cannot fill {folds} folds")
    return _splits(dataset, _assign(table, folds, seed), folds)


@dataclass
class Report:
    task: str
    folds: int
    k: int
    seed: int
    n_samples: int
    accuracy: float | None = None
    rmse_mm: float | None = None
    labels: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    per_fold: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    config_hash: str | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"task: {self.task}  folds: {self.folds}  k: {self.k}  seed: {self.seed}  samples: {self.n_samples}"]
        if self.task == "classify":
            lines.append(f"accuracy: {self.accuracy:.4f}")
            lines += [f"  fold {i}: accuracy {m['accuracy']:.4f} ({m['n_test']} test)" for i, m in enumerate(self.per_fold)]
            width = max([len(str(lab)) for lab in self.labels] + [5])
            lines.append("confusion (rows = true):")
            lines.append(" " * (width + 2) + " ".join(f"{str(lab):>{width}}" for lab in self.labels))
            for lab, row in zip(self.labels, self.confusion):
                lines.append(f"  {str(lab):>{width}} " + " ".join(f"{c:>{width}d}" for c in row))
        else:
            lines.append(f"rmse: {self.rmse_mm:.4f} mm")
            lines += [f"  fold {i}: rmse {m['rmse_mm']:.4f} mm ({m['n_test']} test)" for i, m in enumerate(self.per_fold)]
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(lab) for lab in self.labels])
        for lab, row in zip(self.labels, self.confusion):
            w.writerow([str(lab)] + list(row))
        return buf.getvalue()


def evaluate(dataset: Dataset, task: str = "classify", folds: int = 5, k: int = 3, seed: int = 0,
             standardize: bool = False) -> Report:
    """Cross-validated KNN accuracy (classify) or RMSE in mm (regress)."""
    if task not in ("classify", "regress"):
        raise DatasetError(f"unknown task {task!r}")
    splits = stratified_kfold(dataset, folds, seed) if task == "classify" else group_kfold(dataset, folds, seed)
    report = Report(task, folds, k, seed, len(dataset))
    if task == "classify":
        names = sorted(set(dataset.labels.astype(str)))
        pos = {lab: i for i, lab in enumerate(names)}
        cm = np.zeros((len(names), len(names)), dtype=np.int64)
    preds = [None] * len(dataset)
    for train_idx, test_idx in splits:
        train = dataset.subset(train_idx)
        X = dataset.features
        if standardize:
            mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
            sd[sd == 0] = 1.0
            X = (X - mu) / sd
            train = Dataset((train.features - mu) / sd, train.labels, train.groups)
        if task == "classify":
            hits = 0
            for i in test_idx:
                p, _ = knn_classify(train, X[i], k)
                preds[i] = p
                truth = str(dataset.labels[i])
                cm[pos[truth], pos[p]] += 1
                hits += p == truth
            report.per_fold.append({"accuracy": hits / len(test_idx), "n_test": int(len(test_idx))})
        else:
            err = []
            for i in test_idx:
                p = knn_regress(train, X[i], k)
                preds[i] = p
                err.append(p - float(dataset.labels[i]))
            report.per_fold.append({"rmse_mm": float(np.sqrt(np.mean(np.square(err)))), "n_test": int(len(test_idx))})
    report.predictions = preds
    if task == "classify":
        report.labels, report.confusion = names, cm.tolist()
        report.accuracy = float(np.trace(cm) / cm.sum())
    else:
        y = dataset.labels.astype(np.float64)
        report.rmse_mm = float(np.sqrt(np.mean((np.array(preds, dtype=float) - y) ** 2)))
    if dataset.config_hashes is not None and len(set(dataset.config_hashes)) == 1:
        report.config_hash = str(dataset.config_hashes[0])
    return report


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

_META_COLS = ["label", "group", "scenario", "config_hash"]


def _fmt(x):
    return repr(float(x))


def save_dataset_csv(ds: Dataset, path) -> Path:
    """CSV with metadata columns followed by one column per band frequency (Hz)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    band = ds.band if ds.band is not None else np.arange(ds.features.shape[1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_META_COLS + [f"{f:g}" for f in band])
    for i in range(len(ds)):
        w.writerow([ds.labels[i], ds.groups[i],
                    "" if ds.scenarios is None else ds.scenarios[i],
                    "" if ds.config_hashes is None else ds.config_hashes[i]]
                   + [_fmt(v) for v in ds.features[i]])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def save_dataset_jsonl(ds: Dataset, path) -> Path:
    path = Path(path)
    lines = []
    for i in range(len(ds)):
        rec = {"label": ds.labels[i].item() if hasattr(ds.labels[i], "item") else ds.labels[i],
               "group": str(ds.groups[i]),
               "scenario": None if ds.scenarios is None else str(ds.scenarios[i]),
               "config_hash": None if ds.config_hashes is None else str(ds.config_hashes[i]),
               "features": [float(v) for v in ds.features[i]]}
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_dataset(paths, task: str = "classify", force: bool = False) -> Dataset:
    """Read and concatenate dataset CSV/JSONL files.

    Raises :class:`DatasetError` when rows carry different config hashes,
    unless ``force``.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    feats, labels, groups, scen, hashes, band = [], [], [], [], [], None
    for p in map(Path, paths):
        if p.suffix == ".jsonl":
            for line in p.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    feats.append(rec["features"])
                    labels.append(rec["label"])
                    groups.append(f"{p.stem}/{rec['group']}" if len(paths) > 1 else rec["group"])
                    scen.append(rec.get("scenario") or "")
                    hashes.append(rec.get("config_hash") or "")
        else:
            with open(p, encoding="utf-8", newline="") as fh:
                rows = list(csv.reader(fh))
            head = rows[0]
            nmeta = len(_META_COLS)
            if head[:nmeta] != _META_COLS:
                raise DatasetError(f"{p}: unexpected header {head[:nmeta]}")
            b = np.array([float(x) for x in head[nmeta:]])
            if band is not None and not np.array_equal(band, b):
                raise DatasetError(f"{p}: feature band differs from previous files")
            band = b
            for row in rows[1:]:
                labels.append(row[0])
                groups.append(f"{p.stem}/{row[1]}" if len(paths) > 1 else row[1])
                scen.append(row[2])
                hashes.append(row[3])
                feats.append([float(x) for x in row[nmeta:]])
    if not feats:
        raise DatasetError("no rows in dataset")
    distinct = sorted(set(hashes))
    if len(distinct) > 1 and not force:
        raise DatasetError(f"dataset mixes {len(distinct)} config hashes ({', '.join(h[:12] for h in distinct)}); "
                           "pass force=True to evaluate anyway")
    labels = np.array(labels, dtype=np.float64) if task == "regress" else np.array([str(x) for x in labels])
    return Dataset(np.array(feats), labels, np.array(groups), band, np.array(hashes), np.array(scen))
