"""From snippet probabilities to scored segments, and their evaluation.

Decoding takes maximal runs of above-threshold snippets as candidates
(confidence = the run's highest snippet probability), rescores them with
Gaussian soft suppression, keeps the top N, and scores the survivors
against ground truth with tIoU-thresholded average precision.

Soft suppression never moves a boundary and never raises a score: at each
round the highest-scoring remaining candidate is finalized and every
other remaining score is multiplied by exp(-tIoU^2 / sigma) against it;
candidates ending below the cutoff are dropped at the end.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TIOU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class Candidate:
    """One scored temporal segment prediction, in seconds."""

    start: float
    end: float
    score: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"candidate needs start < end, got [{self.start}, {self.end})")
        if not math.isfinite(self.score):
            raise ValueError("candidate score must be finite")

    @property
    def interval(self):
        return (self.start, self.end)


@dataclass
class EvalConfig:
    """Localization and scoring settings."""

    snippet_threshold: float = 0.5
    nms_sigma: float = 0.5
    nms_cutoff: float = 0.7        # final score cutoff after decay
    top_n: int = 100
    tiou_grid: tuple = DEFAULT_TIOU_GRID

    def __post_init__(self):
        if not 0.0 < self.snippet_threshold < 1.0:
            raise ValueError("snippet threshold must be in (0, 1)")
        if not 0.0 < self.nms_cutoff < 1.0:
            raise ValueError("NMS cutoff must be in (0, 1)")
        if self.nms_sigma <= 0:
            raise ValueError("NMS sigma must be positive")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        self.tiou_grid = tuple(float(t) for t in self.tiou_grid)


def decode_segments(scores, duration: float, cfg: EvalConfig):
    """Maximal runs of snippets with p >= threshold become candidates.

    Snippet t maps to [t * duration / T, (t + 1) * duration / T); the
    candidate score is the highest probability inside its run. An empty
    result is legal.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    t_count = scores.size
    if t_count == 0:
        return []
    width = duration / t_count
    above = scores >= cfg.snippet_threshold
    candidates = []
    t = 0
    while t < t_count:
        if not above[t]:
            t += 1
            continue
        run_start = t
        while t < t_count and above[t]:
            t += 1
        candidates.append(Candidate(
            start=run_start * width,
            end=t * width,
            score=float(scores[run_start:t].max()),
        ))
    return candidates


def tiou(a, b) -> float:
    """Temporal intersection over union of two (start, end) intervals."""
    (a0, a1), (b0, b1) = a, b
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0.0:
        return 0.0
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def soft_nms(candidates, sigma: float, cutoff: float):
    """Gaussian soft suppression; returns the rescored survivors.

    Greedy rounds: finalize the highest-scoring remaining candidate (ties
    broken by earlier start, then earlier end), multiply every other
    remaining score by exp(-tIoU^2 / sigma) against it. All candidates
    pass through the rounds; those finishing below ``cutoff`` are dropped.
    Output keeps finalization order (descending final score).
    """
    remaining = [[c.score, c] for c in candidates]
    finalized = []
    while remaining:
        best = 0
        for i in range(1, len(remaining)):
            si, ci = remaining[i]
            sb, cb = remaining[best]
            if si > sb or (si == sb and (ci.start, ci.end) < (cb.start, cb.end)):
                best = i
        score, cand = remaining.pop(best)
        finalized.append(Candidate(cand.start, cand.end, score))
        for entry in remaining:
            overlap = tiou(cand.interval, entry[1].interval)
            if overlap > 0.0:
                entry[0] *= math.exp(-(overlap * overlap) / sigma)
    return [c for c in finalized if c.score >= cutoff]


def top_candidates(candidates, n: int):
    """Best n by score, ties broken by earlier start then earlier end."""
    ordered = sorted(candidates, key=lambda c: (-c.score, c.start, c.end))
    return ordered[:n]


def localize(scores, duration: float, cfg: EvalConfig):
    """Full decoding pipeline: threshold runs, soft suppression, top N."""
    cands = decode_segments(scores, duration, cfg)
    cands = soft_nms(cands, cfg.nms_sigma, cfg.nms_cutoff)
    return top_candidates(cands, cfg.top_n)


def average_precision(predictions, ground_truth, tiou_threshold: float) -> float:
    """AP of scored candidates against ground-truth intervals.

    Predictions are visited in score order (ties by earlier start); each
    claims the highest-tIoU unmatched ground-truth interval at or above
    the threshold. Precision is interpolated with a right-running max
    over the recall curve. Zero ground-truth intervals are undefined.
    """
    gts = [_as_interval(g) for g in ground_truth]
    if not gts:
        raise ValueError("average precision is undefined with zero ground truth")
    preds = sorted(predictions, key=lambda c: (-c.score, c.start, c.end))
    matched = [False] * len(gts)
    hits = np.zeros(len(preds))
    for i, pred in enumerate(preds):
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            overlap = tiou(pred.interval, gt)
            if overlap >= tiou_threshold and overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0:
            matched[best_j] = True
            hits[i] = 1.0
    if not len(preds) or hits.sum() == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    precision = tp / (tp + fp)
    recall = tp / len(gts)
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def _as_interval(g):
    if hasattr(g, "start"):
        return (float(g.start), float(g.end))
    s, e = g
    return (float(s), float(e))


@dataclass
class EpisodeResult:
    """Scored predictions of one evaluated episode."""

    episode_id: str
    label: str
    predictions: list
    ground_truth: list
    ap: dict = field(default_factory=dict)     # tiou threshold -> AP

    @property
    def ap_mean(self) -> float:
        return float(np.mean(list(self.ap.values())))


def score_episode(episode_id: str, label: str, predictions, ground_truth,
                  cfg: EvalConfig) -> EpisodeResult:
    """AP at every grid threshold for one episode's predictions."""
    result = EpisodeResult(episode_id, label, list(predictions),
                           [_as_interval(g) for g in ground_truth])
    for thr in cfg.tiou_grid:
        result.ap[thr] = average_precision(result.predictions,
                                           result.ground_truth, thr)
    return result


def map_report(results, cfg: EvalConfig) -> dict:
    """Mean AP per threshold over episodes, plus the grid mean.

    Episodes with zero ground truth are excluded with a logged note (their
    AP is undefined).
    """
    usable = [r for r in results if r.ground_truth]
    skipped = len(results) - len(usable)
    if skipped:
        logger.warning("map_report: excluded %d episode(s) with zero "
                       "ground-truth segments", skipped)
    if not usable:
        raise ValueError("no scorable episodes")
    report = {}
    for thr in cfg.tiou_grid:
        report[f"map@{thr:g}"] = float(np.mean([r.ap[thr] for r in usable]))
    report["mean"] = float(np.mean(list(report.values())))
    return report


def report_to_csv(report: dict) -> str:
    keys = [k for k in report if k != "mean"] + ["mean"]
    header = ",".join(keys)
    row = ",".join(f"{report[k]:.6f}" for k in keys)
    return header + "\n" + row + "\n"


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def bootstrap_mean_ci(values, num_resamples: int = 10000, alpha: float = 0.05,
                      seed: int = 0):
    """Percentile bootstrap CI for the mean of ``values``.

    Returns (mean, lower, upper). Used for paired per-episode differences
    in ablation comparisons.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng([seed, 0xB007])
    idx = rng.integers(values.size, size=(num_resamples, values.size))
    means = values[idx].mean(axis=1)
    lower, upper = np.quantile(means, [alpha / 2, 1.0 - alpha / 2])
    return float(values.mean()), float(lower), float(upper)
