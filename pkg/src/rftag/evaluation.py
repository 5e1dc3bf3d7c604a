"""Macro PR-AUC scoring, threshold tuning, and prediction ensembling.

PR-AUC here is macro-averaged average precision: per tag, sort tracks by
descending score (ties broken by ascending track id), take the mean of the
precision at each positive, then average over tags that have at least one
positive.  Tags without positives are excluded and reported, never scored
as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .inference import predict_scores
from .models import load_model


@dataclass
class LabelSet:
    """Binary reference labels: tracks x tags."""

    ids: list
    tags: list
    labels: np.ndarray

    def row_of(self, track_id: str) -> np.ndarray:
        return self.labels[self.ids.index(track_id)]


@dataclass
class ThresholdSet:
    """Per-tag decision thresholds selected by F1 on a validation split."""

    tags: list
    thresholds: np.ndarray
    f1: np.ndarray
    flagged: dict = field(default_factory=dict)
    metric: str = "F1"
    source_split: str = "val"


@dataclass
class PredictionSet:
    """Per-track, per-tag scores in [0, 1] with optional binary decisions."""

    ids: list
    tags: list
    scores: np.ndarray
    decisions: Optional[np.ndarray] = None
    thresholds: Optional[ThresholdSet] = None
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("track ids must be unique")
        if self.scores.shape != (len(self.ids), len(self.tags)):
            raise ValueError(f"scores shape {self.scores.shape} does not match "
                             f"{len(self.ids)} ids x {len(self.tags)} tags")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must lie in [0, 1]")
        if self.decisions is not None and self.thresholds is None:
            raise ValueError("decisions require an attached thresholds record")


@dataclass
class EvalReport:
    tags: list
    ap: list            # float per tag, None where unscoreable
    support: list       # positive count per tag
    macro_pr_auc: float
    skipped: list       # tags with no positives

    def as_csv(self) -> str:
        lines = ["tag,ap,positives"]
        for tag, ap, sup in zip(self.tags, self.ap, self.support):
            lines.append(f"{tag},{'' if ap is None else f'{ap:.6f}'},{sup}")
        lines.append(f"macro_pr_auc={self.macro_pr_auc:.6f}")
        return "\n".join(lines) + "\n"


def average_precision(scores, labels, ids=None) -> float:
    """Mean of precision at each positive, over the score-sorted list."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if ids is None:
        ids = [str(i) for i in range(len(scores))]
    n_pos = int(labels.sum())
    if n_pos < 1:
        raise ValueError("average precision needs at least one positive label")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


def macro_pr_auc(preds: PredictionSet, labels: LabelSet) -> EvalReport:
    """Mean AP over scoreable tags; per-tag detail in the report."""
    if set(preds.ids) != set(labels.ids):
        extra = sorted(set(preds.ids) - set(labels.ids))
        missing = sorted(set(labels.ids) - set(preds.ids))
        raise ValueError(f"track id mismatch: predictions-only {extra}, labels-only {missing}")
    if list(preds.tags) != list(labels.tags):
        raise ValueError(f"tag mismatch: {preds.tags} vs {labels.tags}")
    row = {tid: i for i, tid in enumerate(labels.ids)}
    aligned = labels.labels[[row[tid] for tid in preds.ids]]
    aps = []
    supports = []
    skipped = []
    for j, tag in enumerate(preds.tags):
        sup = int(aligned[:, j].sum())
        supports.append(sup)
        if sup == 0:
            aps.append(None)
            skipped.append(tag)
        else:
            aps.append(average_precision(preds.scores[:, j], aligned[:, j], preds.ids))
    scored = [a for a in aps if a is not None]
    if not scored:
        raise ValueError("no tag has a positive label; macro PR-AUC undefined")
    return EvalReport(tags=list(preds.tags), ap=aps, support=supports,
                      macro_pr_auc=float(np.mean(scored)), skipped=skipped)


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------


def ensemble_average(members: list) -> PredictionSet:
    """Elementwise mean of member scores; decisions are dropped."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    first = members[0]
    acc = np.array(first.scores, dtype=np.float64)
    for m in members[1:]:
        if set(m.ids) != set(first.ids):
            raise ValueError("ensemble members carry different track ids")
        if list(m.tags) != list(first.tags):
            raise ValueError(f"ensemble members carry different tags: {m.tags} vs {first.tags}")
        row = {tid: i for i, tid in enumerate(m.ids)}
        acc += m.scores[[row[tid] for tid in first.ids]]
    provenance = [p for m in members for p in (m.provenance or [])]
    return PredictionSet(ids=list(first.ids), tags=list(first.tags),
                         scores=acc / len(members), provenance=provenance)


def snapshot_ensemble(artifacts, clips, batch_size: int = 8) -> PredictionSet:
    """Predictions averaged over best-val plus up to the 4 most recent SWA models.

    ``artifacts`` is a training RunArtifacts; ``clips`` a list of TaggedClip.
    Each member predicts with sliding windows; members' score sets are then
    averaged.  Fewer than 4 SWA checkpoints is allowed and recorded in the
    provenance.
    """
    paths = [artifacts.best_path] + list(artifacts.swa_paths[-4:])
    if not artifacts.swa_paths:
        paths = [artifacts.best_path]
    members = []
    for path in paths:
        model, echo = load_model(path)
        scores = predict_scores(model, [c.values for c in clips],
                                crop_frames=int(echo["crop_frames"]),
                                norm_mean=float(echo["norm_mean"]),
                                norm_std=float(echo["norm_std"]),
                                mode="windows", batch_size=batch_size)
        tags = echo["tags"].split(",")
        members.append(PredictionSet(ids=[c.track_id for c in clips], tags=tags,
                                     scores=scores, provenance=[str(path)]))
    return ensemble_average(members)


# ---------------------------------------------------------------------------
# decision thresholds
# ---------------------------------------------------------------------------


def _f1(decisions: np.ndarray, labels: np.ndarray) -> float:
    tp = int(np.sum(decisions & labels))
    fp = int(np.sum(decisions & ~labels))
    fn = int(np.sum(~decisions & labels))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def tune_thresholds(preds: PredictionSet, labels: LabelSet) -> ThresholdSet:
    """Per tag, the threshold maximizing F1 over midpoint candidates.

    Candidates are midpoints between consecutive distinct sorted scores plus
    the 0.5 fallback; ties break toward the higher threshold.  A decision is
    positive when score >= threshold.
    """
    if set(preds.ids) != set(labels.ids):
        raise ValueError("threshold tuning requires matching track ids")
    row = {tid: i for i, tid in enumerate(labels.ids)}
    aligned = labels.labels[[row[tid] for tid in preds.ids]].astype(bool)
    n_tags = len(preds.tags)
    thresholds = np.full(n_tags, 0.5)
    f1s = np.zeros(n_tags)
    flagged = {}
    for j, tag in enumerate(preds.tags):
        y = aligned[:, j]
        s = preds.scores[:, j]
        if not y.any():
            flagged[tag] = "no positive labels"
            continue
        distinct = np.unique(s)
        candidates = list((distinct[:-1] + distinct[1:]) / 2.0) + [0.5]
        if len(distinct) == 1:
            flagged[tag] = "all scores equal"
        best_t, best_f1 = 0.5, -1.0
        for t in sorted(candidates):
            f1 = _f1(s >= t, y)
            if f1 >= best_f1:  # >= so ties move toward the higher threshold
                best_t, best_f1 = t, f1
        thresholds[j] = best_t
        f1s[j] = best_f1
    return ThresholdSet(tags=list(preds.tags), thresholds=thresholds, f1=f1s,
                        flagged=flagged)


def apply_thresholds(preds: PredictionSet, thresholds: ThresholdSet) -> PredictionSet:
    if list(preds.tags) != list(thresholds.tags):
        raise ValueError("threshold tags do not match prediction tags")
    decisions = (preds.scores >= thresholds.thresholds[None, :]).astype(np.int8)
    return PredictionSet(ids=list(preds.ids), tags=list(preds.tags),
                         scores=preds.scores.copy(), decisions=decisions,
                         thresholds=thresholds, provenance=list(preds.provenance))


# ---------------------------------------------------------------------------
# TSV / CSV files
# ---------------------------------------------------------------------------


def save_predictions(path, preds: PredictionSet, decisions: bool = False) -> None:
    """TSV: header ``track_id<TAB>tag...``, scores to 6 decimals (or 0/1)."""
    lines = ["\t".join(["track_id"] + list(preds.tags))]
    matrix = preds.decisions if decisions else preds.scores
    if decisions and preds.decisions is None:
        raise ValueError("prediction set has no decisions to write")
    for i, tid in enumerate(preds.ids):
        if decisions:
            cells = [str(int(v)) for v in matrix[i]]
        else:
            cells = [f"{v:.6f}" for v in matrix[i]]
        lines.append("\t".join([tid] + cells))
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path) -> PredictionSet:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty predictions file")
    header = lines[0].split("\t")
    if header[0] != "track_id":
        raise ValueError(f"{path}: first column must be track_id, got {header[0]!r}")
    tags = header[1:]
    ids = []
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return PredictionSet(ids=ids, tags=tags, scores=np.array(rows, dtype=np.float64))


def save_eval_report(path, report: EvalReport) -> None:
    Path(path).write_text(report.as_csv())
