"""Mask metrics and per-level evaluation.

Conventions: a pixel is foreground when its probability is >= the threshold;
the IoU of two empty masks is 1.0; P@50 counts IoU >= 0.5 as a hit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import PisModel
from .scenes import DatasetRecord, concept_instruction, np_extract_baseline
from .trainer import TrainingData


class EmptyEvaluationError(ValueError):
    pass


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(getattr(p, "data", p)) >= threshold


def iou(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def giou_metric(ious) -> float:
    ious = list(ious)
    if not ious:
        raise EmptyEvaluationError("gIoU of an empty list")
    return math.fsum(ious) / len(ious)  # correctly rounded, independent of order


def p_at_50(ious) -> float:
    ious = list(ious)
    if not ious:
        raise EmptyEvaluationError("P@50 of an empty list")
    return 100.0 * sum(1 for v in ious if v >= 0.5) / len(ious)


@dataclass
class EvalResult:
    level: str
    giou: float
    p_at_50: float
    n_samples: int
    ious: list[float] | None = None

    def row(self, tag: str = "") -> list:
        return [self.level, self.n_samples, f"{100 * self.giou:.1f}", f"{self.p_at_50:.1f}", tag]


REPORT_COLUMNS = ("level", "n", "giou", "p_at_50", "model_tag")


def _prompts(record: DatasetRecord, level: str) -> list[str]:
    if level == "concept":
        return [record.concept_np]
    return [i.text for i in record.instructions(level)]


def evaluate_predictor(predict: Callable[[np.ndarray, list[str], list[int]], np.ndarray],
                       data: TrainingData, level: str, batch_size: int = 64,
                       prompt_fn=None) -> EvalResult:
    """Score ``predict(image_indices, prompts) -> probs`` against target masks."""
    prompt_fn = prompt_fn or _prompts
    jobs = [(i, t) for i, r in enumerate(data.records) for t in prompt_fn(r, level)]
    if not jobs:
        raise EmptyEvaluationError(f"no {level} prompts in dataset")
    ious = []
    for k in range(0, len(jobs), batch_size):
        chunk = jobs[k:k + batch_size]
        idx = np.array([i for i, _ in chunk])
        probs = predict(idx, [t for _, t in chunk])
        for (i, _), p in zip(chunk, probs):
            ious.append(iou(binarize(p), data.targets[i] > 0.5))
    return EvalResult(level, giou_metric(ious), p_at_50(ious), len(ious), ious)


def evaluate_model(model: PisModel, data: TrainingData, level: str, batch_size: int = 64) -> EvalResult:
    """Route each prompt by its level, predict, binarize at 0.5 and score."""
    feats = data.frozen_features(model)

    def predict(idx, texts):
        return model.forward(feats[idx], texts, level).data

    return evaluate_predictor(predict, data, level, batch_size)


def evaluate_np_baseline(model: PisModel, data: TrainingData, level: str,
                         batch_size: int = 64) -> EvalResult:
    """Collapse every instruction to a noun phrase and segment it as a concept."""
    feats = data.frozen_features(model)

    def prompts(record, lvl):
        if lvl == "concept":
            return [np_extract_baseline(concept_instruction(record))]
        return [np_extract_baseline(i) for i in record.instructions(lvl)]

    def predict(idx, texts):
        return model.forward(feats[idx], texts, "concept").data

    return evaluate_predictor(predict, data, level, batch_size, prompts)


def format_report(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()
