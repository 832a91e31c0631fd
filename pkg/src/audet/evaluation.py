"""Scoring: thresholding, temporal majority smoothing, F1, challenge metric.

The challenge metric is 0.5 * pooled accuracy + 0.5 * mean per-AU F1.
Accuracy pools every valid (label != -1) decision across videos and
AUs.  The F1 mean runs over AUs that received at least one valid
decision; an evaluated AU whose F1 denominator is zero scores 0 and is
flagged as degenerate rather than dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AU_ORDER, VideoSequence, landmark_diffs
from .errors import ContractViolation
from .model import ModelParams, model_forward


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Probabilities to 0/1 decisions; exactly-at-threshold counts as active."""
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"binarize: threshold must be in (0, 1), got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.int8)


def smooth_track(binary: np.ndarray, window: int) -> np.ndarray:
    """Sliding majority vote over one 0/1 track, replicate padding.

    The window must be odd so no vote ties; window 1 is the identity.
    """
    if window < 1 or window % 2 == 0:
        raise ContractViolation(f"smoothing window must be odd and >= 1, got {window}")
    track = np.asarray(binary)
    if track.ndim != 1:
        raise ContractViolation(f"smooth_track: expected 1-d track, got {track.shape}")
    if not np.isin(track, (0, 1)).all():
        raise ContractViolation("smooth_track: track must be 0/1")
    if window == 1:
        return track.astype(np.int8)
    half = window // 2
    padded = np.pad(track.astype(np.int64), half, mode="edge")
    sums = np.lib.stride_tricks.sliding_window_view(padded, window).sum(axis=1)
    return (2 * sums > window).astype(np.int8)


def smooth(binary: np.ndarray, window: int) -> np.ndarray:
    """Column-wise majority smoothing of a T x 8 decision array."""
    arr = np.asarray(binary)
    if arr.ndim != 2:
        raise ContractViolation(f"smooth: expected T x AU array, got {arr.shape}")
    return np.stack([smooth_track(arr[:, j], window) for j in range(arr.shape[1])], axis=1)


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, bool]:
    """F1 = 2tp / (2tp + fp + fn); a zero denominator scores 0, flagged."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0, True
    return 2.0 * tp / denom, False


@dataclass
class MetricsReport:
    tp: np.ndarray  # per AU, int64
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    per_au_f1: np.ndarray  # per AU, float
    degenerate: np.ndarray  # per AU, bool: F1 denominator was zero
    evaluated: np.ndarray  # per AU, bool: had at least one valid decision
    accuracy: float
    mean_f1: float
    metric: float


def challenge_metric(
    predictions: dict[str, np.ndarray], labels: dict[str, np.ndarray]
) -> MetricsReport:
    """Score 0/1 predictions against labels with unknowns masked out.

    Both arguments map video id to a T x 8 array; the key sets and the
    per-video lengths must agree.  Raises if not a single decision is
    valid.
    """
    if set(predictions) != set(labels):
        raise ContractViolation(
            f"video ids differ: predictions {sorted(predictions)} vs labels {sorted(labels)}"
        )
    if not predictions:
        raise ContractViolation("no videos to score")
    n_aus = len(AU_ORDER)
    tp = np.zeros(n_aus, dtype=np.int64)
    fp = np.zeros(n_aus, dtype=np.int64)
    fn = np.zeros(n_aus, dtype=np.int64)
    tn = np.zeros(n_aus, dtype=np.int64)
    for vid in sorted(predictions):
        pred = np.asarray(predictions[vid])
        lab = np.asarray(labels[vid])
        if pred.shape != lab.shape or pred.ndim != 2 or pred.shape[1] != n_aus:
            raise ContractViolation(
                f"video {vid!r}: predictions {pred.shape} vs labels {lab.shape}, "
                f"expected matching T x {n_aus}"
            )
        if not np.isin(pred, (0, 1)).all():
            raise ContractViolation(f"video {vid!r}: predictions must be 0/1")
        if not np.isin(lab, (-1, 0, 1)).all():
            raise ContractViolation(f"video {vid!r}: labels must be in {{-1, 0, 1}}")
        valid = lab != -1
        tp += ((pred == 1) & (lab == 1) & valid).sum(axis=0)
        fp += ((pred == 1) & (lab == 0) & valid).sum(axis=0)
        fn += ((pred == 0) & (lab == 1) & valid).sum(axis=0)
        tn += ((pred == 0) & (lab == 0) & valid).sum(axis=0)

    decisions = tp + fp + fn + tn
    if decisions.sum() == 0:
        raise ContractViolation("no valid decisions: every label is -1")
    evaluated = decisions > 0
    per_au_f1 = np.zeros(n_aus)
    degenerate = np.zeros(n_aus, dtype=bool)
    for i in range(n_aus):
        if evaluated[i]:
            per_au_f1[i], degenerate[i] = f1_from_counts(int(tp[i]), int(fp[i]), int(fn[i]))
        else:
            degenerate[i] = True
    accuracy = float((tp + tn).sum() / decisions.sum())
    # sequential sum: keeps the mean reproducible decision-for-decision
    scored = [float(per_au_f1[i]) for i in range(n_aus) if evaluated[i]]
    mean_f1 = sum(scored) / len(scored)
    return MetricsReport(
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        per_au_f1=per_au_f1,
        degenerate=degenerate,
        evaluated=evaluated,
        accuracy=accuracy,
        mean_f1=mean_f1,
        metric=0.5 * accuracy + 0.5 * mean_f1,
    )


# ---------------------------------------------------------------------------
# running the model over videos


def predict_video(params: ModelParams, video: VideoSequence) -> np.ndarray:
    """Per-frame activation probabilities, T x 8 float64."""
    diffs = landmark_diffs(video).astype(params.dtype)
    probs = np.empty((len(video), len(AU_ORDER)))
    for t, frame in enumerate(video.frames):
        probs[t] = model_forward(params, frame.image_stack().astype(params.dtype), diffs[t]).probs
    return probs


@dataclass
class PredictionTrack:
    video_id: str
    probs: np.ndarray  # T x 8 float64
    binary: np.ndarray  # T x 8 int8, threshold 0.5
    smoothed: np.ndarray  # T x 8 int8, majority filtered


@dataclass
class EvalReport:
    window: int
    unsmoothed: MetricsReport
    smoothed: MetricsReport
    tracks: list[PredictionTrack]


def predict_tracks(params: ModelParams, corpus: list[VideoSequence], window: int = 5):
    tracks = []
    for video in corpus:
        probs = predict_video(params, video)
        binary = binarize(probs)
        tracks.append(PredictionTrack(video.video_id, probs, binary, smooth(binary, window)))
    return tracks


def evaluate(params: ModelParams, corpus: list[VideoSequence], window: int = 5) -> EvalReport:
    """Score a corpus with and without temporal smoothing."""
    if not corpus:
        raise ContractViolation("evaluate: empty corpus")
    tracks = predict_tracks(params, corpus, window)
    labels = {v.video_id: v.labels_array() for v in corpus}
    raw = challenge_metric({t.video_id: t.binary for t in tracks}, labels)
    smoothed = challenge_metric({t.video_id: t.smoothed for t in tracks}, labels)
    return EvalReport(window=window, unsmoothed=raw, smoothed=smoothed, tracks=tracks)


# ---------------------------------------------------------------------------
# artifacts

PREDICTION_HEADER = "frame," + ",".join(AU_ORDER)


def write_probability_csv(track: PredictionTrack, path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [PREDICTION_HEADER]
    for t in range(track.probs.shape[0]):
        lines.append(f"{t}," + ",".join(f"{p:.6f}" for p in track.probs[t]))
    target.write_text("\n".join(lines) + "\n")
    return target


def write_binary_csv(track: PredictionTrack, path, smoothed: bool = True) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    decisions = track.smoothed if smoothed else track.binary
    lines = [PREDICTION_HEADER]
    for t in range(decisions.shape[0]):
        lines.append(f"{t}," + ",".join(str(int(x)) for x in decisions[t]))
    target.write_text("\n".join(lines) + "\n")
    return target


def render_report(report: EvalReport, videos: int) -> str:
    """Human-readable scoring summary covering both variants."""
    lines = [f"window = {report.window}", f"videos = {videos}"]
    for variant, metrics in (("unsmoothed", report.unsmoothed), ("smoothed", report.smoothed)):
        lines.append(f"{variant}.accuracy = {metrics.accuracy:.6f}")
        lines.append(f"{variant}.mean_f1 = {metrics.mean_f1:.6f}")
        lines.append(f"{variant}.challenge_metric = {metrics.metric:.6f}")
    for variant, metrics in (("unsmoothed", report.unsmoothed), ("smoothed", report.smoothed)):
        for i, au in enumerate(AU_ORDER):
            lines.append(
                f"{variant}.{au}: tp={int(metrics.tp[i])} fp={int(metrics.fp[i])} "
                f"fn={int(metrics.fn[i])} tn={int(metrics.tn[i])} "
                f"f1={metrics.per_au_f1[i]:.6f}"
                + (" degenerate" if metrics.degenerate[i] else "")
            )
    return "\n".join(lines) + "\n"


REPORT_CSV_HEADER = (
    "window,accuracy,mean_f1,challenge_metric,"
    "smoothed_accuracy,smoothed_mean_f1,smoothed_challenge_metric"
)


def write_report_csv(report: EvalReport, path) -> Path:
    """Single-row summary suitable for aggregating runs in a spreadsheet."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    u, s = report.unsmoothed, report.smoothed
    row = (
        f"{report.window},{u.accuracy:.6f},{u.mean_f1:.6f},{u.metric:.6f},"
        f"{s.accuracy:.6f},{s.mean_f1:.6f},{s.metric:.6f}"
    )
    target.write_text(REPORT_CSV_HEADER + "\n" + row + "\n")
    return target
