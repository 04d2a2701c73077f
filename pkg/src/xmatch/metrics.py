"""ROC-AUC, F1 and the model-by-dataset results table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import ImageRecord, LabeledPair
from .tokenizer import Vocabulary


class UndefinedMetricError(ValueError):
    pass


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting half.

    Computed from the rank sum of the positives (average ranks for ties).
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_at_threshold(scores, labels, threshold: float) -> float:
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise ValueError("f1 of an empty set")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    if tp == 0:
        return 0.0
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return 2.0 * tp / (2.0 * tp + fp + fn)


def best_f1(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds at each distinct score plus one above them all.

    Ties in F1 go to the lowest threshold.
    """
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise ValueError("f1 of an empty set")
    distinct = np.unique(s)
    above = np.nextafter(distinct[-1], np.inf)
    best, best_t = -1.0, float(above)
    for t in list(distinct) + [above]:
        f = f1_at_threshold(s, y, t)
        if f > best:
            best, best_t = f, float(t)
    return best, best_t


@dataclass
class EvalRow:
    model: str
    dataset: str
    auc: float
    f1_at_half: float
    best_f1: float
    best_threshold: float
    n_pos: int
    n_neg: int


def evaluate_scores(scores, labels, model: str, dataset: str) -> EvalRow:
    s, y = _as_arrays(scores, labels)
    try:
        auc = roc_auc(s, y)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"dataset {dataset!r}: {exc}") from None
    bf, bt = best_f1(s, y)
    return EvalRow(model, dataset, auc, f1_at_threshold(s, y, 0.5), bf, bt, int(y.sum()), int((~y).sum()))


def evaluate(
    model,
    dataset: Sequence[LabeledPair],
    features: Mapping[str, ImageRecord],
    vocab: Vocabulary,
    model_name: str = "model",
    dataset_name: str = "eval",
) -> EvalRow:
    from .model import score_pairs

    if not dataset:
        raise UndefinedMetricError(f"dataset {dataset_name!r} is empty")
    scores = score_pairs(model, dataset, features, vocab)
    return evaluate_scores(scores, [p.label for p in dataset], model_name, dataset_name)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    @property
    def datasets(self) -> list[str]:
        return list(dict.fromkeys(r.dataset for r in self.rows))

    def get(self, model: str, dataset: str) -> EvalRow | None:
        for r in self.rows:
            if r.model == model and r.dataset == dataset:
                return r
        return None

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls([EvalRow(**r) for r in json.loads(text)["rows"]])

    def to_text(self) -> str:
        """Rows are models; each dataset contributes AUC, F1@0.5 and best-F1 columns."""
        datasets = self.datasets
        name_w = max([len("model")] + [len(m) for m in self.models])
        sub = ("AUC", "F1@0.5", "bestF1")
        col_w = 7
        group_w = len(sub) * (col_w + 1) - 1
        head1 = " " * name_w + "".join(" | " + d[:group_w].center(group_w) for d in datasets)
        head2 = "model".ljust(name_w) + "".join(
            " | " + " ".join(s.rjust(col_w) for s in sub) for _ in datasets
        )
        lines = [head1, head2, "-" * len(head2)]
        for m in self.models:
            cells = []
            for d in datasets:
                r = self.get(m, d)
                vals = ("-",) * 3 if r is None else (f"{r.auc:.3f}", f"{r.f1_at_half:.3f}", f"{r.best_f1:.3f}")
                cells.append(" | " + " ".join(v.rjust(col_w) for v in vals))
            lines.append(m.ljust(name_w) + "".join(cells))
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        cols = ["model", "dataset", "auc", "f1_at_half", "best_f1", "best_threshold", "n_pos", "n_neg"]
        out = ["\t".join(cols)]
        for r in self.rows:
            out.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in asdict(r).values()))
        return "\n".join(out) + "\n"


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates at every distinct threshold, from (0, 0) to (1, 1)."""
    s, y = _as_arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[cut]
    fps = np.cumsum(~y)[cut]
    tpr = np.r_[0.0, tps / max(1, y.sum())]
    fpr = np.r_[0.0, fps / max(1, (~y).sum())]
    return fpr, tpr
