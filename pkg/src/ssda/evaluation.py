"""Metrics (accuracy, confusion matrix, IoU, mIoU), held-out evaluation
and pooled-feature embedding export for external projection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import (IGNORE_LABEL, DataError, DatasetManifest, ManifestDataset)
from .model import forward_main, to_tensor_batch


@dataclass
class MetricsRecord:
    accuracy: float
    per_class_iou: list
    miou: float
    confusion: np.ndarray
    num_units: int = 0
    extras: dict = field(default_factory=dict)


def confusion_matrix(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def update_confusion(conf: np.ndarray, truth: np.ndarray,
                     pred: np.ndarray) -> None:
    truth = np.asarray(truth).ravel()
    pred = np.asarray(pred).ravel()
    valid = truth != IGNORE_LABEL
    truth = truth[valid]
    pred = pred[valid]
    np.add.at(conf, (truth, pred), 1)


def accuracy(conf: np.ndarray) -> float:
    total = conf.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(conf) / total)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU_c = TP / (TP + FP + FN); classes absent from both ground truth
    and prediction get NaN (excluded from the mean)."""
    if conf.sum() == 0:
        raise DataError("empty confusion matrix")
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(conf.shape[0], np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return iou


def miou(conf: np.ndarray) -> float:
    iou = per_class_iou(conf)
    return float(np.nanmean(iou))


def evaluate(encoder, main_head, manifest: DatasetManifest, task: str,
             batch_size: int = 32) -> MetricsRecord:
    """Eval-mode pass over a held-out manifest; IGNORE pixels excluded."""
    if task != manifest.task:
        raise DataError(f"task mismatch: asked {task!r}, "
                        f"manifest is {manifest.task!r}")
    dataset = ManifestDataset(manifest)
    conf = confusion_matrix(manifest.num_classes)
    with torch.no_grad():
        n = len(dataset)
        for start in range(0, n, batch_size):
            idx = list(range(start, min(start + batch_size, n)))
            batch = to_tensor_batch([dataset.image(i) for i in idx])
            logits = forward_main(encoder, main_head, batch, "eval")
            pred = logits.argmax(dim=1).cpu().numpy()
            truth = np.stack([np.asarray(dataset.label(i)) for i in idx]) \
                if task == "segmentation" \
                else np.asarray([dataset.label(i) for i in idx])
            update_confusion(conf, truth, pred)
    iou = per_class_iou(conf)
    return MetricsRecord(accuracy(conf),
                         [None if np.isnan(v) else float(v) for v in iou],
                         float(np.nanmean(iou)), conf, int(conf.sum()))


def export_embeddings(encoder, manifests: list, tap: str, out_path: str,
                      batch_size: int = 32) -> int:
    """One globally average-pooled tap feature vector per image, with class
    and domain columns, as CSV for external projection. Returns row count."""
    if tap not in ("middle", "final"):
        raise DataError(f"unknown tap {tap!r}")
    rows = 0
    writer = None
    encoder.eval()
    with open(out_path, "w", encoding="utf-8", newline="") as f, \
            torch.no_grad():
        for manifest in manifests:
            dataset = ManifestDataset(manifest)
            n = len(dataset)
            for start in range(0, n, batch_size):
                idx = list(range(start, min(start + batch_size, n)))
                batch = to_tensor_batch([dataset.image(i) for i in idx])
                feats = encoder.features(batch)[tap].mean(dim=(2, 3))
                feats = feats.cpu().numpy()
                if writer is None:
                    writer = csv.writer(f)
                    writer.writerow([f"f{j}" for j in range(feats.shape[1])]
                                    + ["label", "domain"])
                for row_i, i in enumerate(idx):
                    label = dataset.label(i)
                    if manifest.task == "segmentation":
                        vals, counts = np.unique(
                            np.asarray(label)[np.asarray(label)
                                              != IGNORE_LABEL],
                            return_counts=True)
                        fg = vals[vals > 0]
                        label = int(fg[np.argmax(counts[vals > 0])]) \
                            if fg.size else 0
                    writer.writerow(list(feats[row_i]) + [label,
                                                          dataset.domain(i)])
                    rows += 1
    return rows
