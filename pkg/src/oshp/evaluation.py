"""Meta-test protocols and segmentation metrics.

mIoU is aggregated globally: intersections and unions are summed over all
evaluated episodes before dividing. Binary-IoU is averaged per episode.
Classes that never occur (zero union) are left out of every mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import DatasetManifest, Episode, FoldSpec, TestPair, make_episode, save_mask
from .errors import ContractError

PROTOCOLS = ("k_way", "one_way")


class Predictor(Protocol):
    def predict(self, episode: Episode, novel_classes: Iterable[int] = ()) -> np.ndarray: ...


class ConfusionAccumulator:
    """Integer confusion matrix (rows: ground truth, columns: prediction)."""

    def __init__(self, num_classes: int):
        self.num_classes = int(num_classes)
        self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.binary_ious: list[float] = []

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes)
        out.confusion = self.confusion + other.confusion
        out.binary_ious = self.binary_ious + other.binary_ious
        return out

    @property
    def intersection(self) -> np.ndarray:
        return np.diag(self.confusion).copy()

    @property
    def union(self) -> np.ndarray:
        return self.confusion.sum(0) + self.confusion.sum(1) - np.diag(self.confusion)

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def class_iou(self) -> dict[int, float]:
        """IoU in percent for every class with a nonzero union."""
        inter, union = self.intersection, self.union
        return {c: 100.0 * inter[c] / union[c] for c in range(self.num_classes) if union[c] > 0}

    def miou(self, classes: Iterable[int]) -> float:
        ious = self.class_iou()
        vals = [ious[c] for c in sorted(set(classes)) if c in ious]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else float("nan")

    def mean_binary_iou(self) -> float:
        if not self.binary_ious:
            return float("nan")
        return math.fsum(self.binary_ious) / len(self.binary_ious)


def score_episode(pred_labels, gt_labels, class_set: Sequence[int],
                  acc: ConfusionAccumulator) -> ConfusionAccumulator:
    pred = np.asarray(pred_labels).astype(np.int64)
    gt = np.asarray(gt_labels).astype(np.int64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = acc.num_classes
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n):
        raise ContractError(f"labels must lie in [0, {n})")
    stray = set(np.unique(pred).tolist()) - set(int(c) for c in class_set)
    if stray:
        raise ContractError(f"predicted labels {sorted(stray)} are outside the class set {list(class_set)}")
    acc.confusion += np.bincount(gt.ravel() * n + pred.ravel(), minlength=n * n).reshape(n, n)
    return acc


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0  # both empty: perfect agreement
    return np.logical_and(a, b).sum() / union


def binary_iou(pred, gt) -> float:
    """Mean of foreground and background IoU, in percent."""
    pred, gt = np.asarray(pred) != 0, np.asarray(gt) != 0
    if pred.shape != gt.shape:
        raise ContractError("shape mismatch")
    return 100.0 * (_iou(pred, gt) + _iou(~pred, ~gt)) / 2.0


def protocol_episodes(manifest: DatasetManifest, test_list: Sequence[TestPair], protocol: str):
    if protocol == "k_way":
        for p in test_list:
            yield make_episode(manifest, p.support_index, p.query_index, "meta_test", class_set=p.class_set)
    elif protocol == "one_way":
        for p in test_list:
            for c in p.class_set:
                if c != 0:
                    yield make_episode(manifest, p.support_index, p.query_index, "meta_test", target_class=c)
    else:
        raise ContractError(f"unknown protocol {protocol!r}")


def run_meta_test(model: Predictor, manifest: DatasetManifest, test_list: Sequence[TestPair],
                  protocol: str, fold: FoldSpec, dump_dir=None) -> dict:
    """Evaluate ``model`` on every test pair under one protocol.

    Returns a dict of percentages: ``novel_miou``, ``human_miou`` and either
    ``accuracy`` (k_way) or ``binary_iou`` (one_way), plus ``class_iou``.
    """
    acc = ConfusionAccumulator(manifest.num_classes)
    for i, ep in enumerate(protocol_episodes(manifest, test_list, protocol)):
        pred = np.asarray(model.predict(ep, fold.novel_classes))
        gt = ep.query_target()
        score_episode(pred, gt, ep.class_set, acc)
        if protocol == "one_way":
            acc.binary_ious.append(binary_iou(pred, gt))
        if dump_dir is not None:
            save_mask(pred, Path(dump_dir) / protocol / f"{i:05d}_s{ep.support_index}_q{ep.query_index}.png")
    out = {"novel_miou": acc.miou(fold.novel_classes), "human_miou": acc.miou(fold.c_human),
           "class_iou": {int(c): v for c, v in acc.class_iou().items()},
           "episodes": len(acc.binary_ious) if protocol == "one_way" else len(test_list)}
    if protocol == "k_way":
        out["accuracy"] = acc.accuracy()
    else:
        out["binary_iou"] = acc.mean_binary_iou()
    return out


class OraclePredictor:
    """Returns the ground truth; metrics must come out at 100%."""

    def predict(self, episode: Episode, novel_classes=()) -> np.ndarray:
        return episode.query_target()


class RandomPredictor:
    """Uniformly random class from the episode's class set at every pixel."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def predict(self, episode: Episode, novel_classes=()) -> np.ndarray:
        cs = np.asarray(episode.class_set)
        return cs[self.rng.integers(len(cs), size=episode.query_image.shape[:2])]


K_WAY_KEYS = ("novel_miou", "human_miou", "accuracy")
ONE_WAY_KEYS = ("novel_miou", "human_miou", "binary_iou")


@dataclass
class EvalReport:
    """Per-fold results for both protocols, with fold averages."""

    folds: dict[str, dict[str, dict]] = field(default_factory=dict)

    def add(self, fold_name: str, protocol: str, result: dict) -> None:
        self.folds.setdefault(fold_name, {})[protocol] = result

    def average(self, protocol: str, key: str) -> float:
        vals = [f[protocol][key] for f in self.folds.values() if protocol in f]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    def to_dict(self) -> dict:
        return {"aggregation": "global (mIoU), per-episode (Binary-IoU)", "folds": self.folds}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls({k: dict(v) for k, v in d["folds"].items()})

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport({k: dict(v) for k, v in self.folds.items()})
        for name, protos in other.folds.items():
            for proto, res in protos.items():
                out.add(name, proto, res)
        return out

    def to_table(self) -> str:
        """Fold columns followed by the average, laid out like the usual OSHP result tables."""
        names = sorted(self.folds)

        def fmt(v):
            return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.1f}"

        def row(protocol, key):
            vals = [self.folds[n].get(protocol, {}).get(key) for n in names]
            return [fmt(v) for v in vals] + [fmt(self.average(protocol, key))]

        header = ["metric"] + names + ["Ave"]
        rows = [header]
        labels = {"novel_miou": "C_novel mIoU", "human_miou": "C_human mIoU",
                  "accuracy": "Overall Acc.", "binary_iou": "Bi-mIoU"}
        for protocol, keys in (("k_way", K_WAY_KEYS), ("one_way", ONE_WAY_KEYS)):
            if not any(protocol in self.folds[n] for n in names):
                continue
            for k in keys:
                rows.append([f"{protocol} {labels[k]}"] + row(protocol, k))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(w) if j else cell.ljust(w) for j, (cell, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append("(values in %; mIoU aggregated globally over episodes)")
        return "\n".join(lines)
