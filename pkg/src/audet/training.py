"""Deterministic training loop: weighted cross entropy, clipping, Adam.

Videos split 80/20 into train and validation by id.  Every batch
rebuilds the graph, accumulates gradients once, clips by global norm,
then applies bias-corrected Adam.  All shuffling comes from RNGs seeded
by (seed, salt), so two runs with the same corpus and config produce
bitwise identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, tensor as T
from .data import AU_ORDER, VideoSequence, landmark_diffs
from .errors import ContractViolation, EmptyBatchError, NumericError
from .model import ModelConfig, ModelParams, model_forward
from .tensor import Tensor

WEIGHT_CAP = 10.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 20
    grad_clip_global_norm: float = 5.0
    class_weighting: bool = True
    precision: str = "single"
    val_fraction: float = 0.2
    seed: int = 7

    def validate(self):
        if self.learning_rate <= 0:
            raise ContractViolation(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ContractViolation(f"{name} must be in [0, 1), got {v}")
        if self.adam_epsilon <= 0:
            raise ContractViolation(f"adam_epsilon must be > 0, got {self.adam_epsilon}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractViolation("batch_size and epochs must be >= 1")
        if self.grad_clip_global_norm <= 0:
            raise ContractViolation(
                f"grad_clip_global_norm must be > 0, got {self.grad_clip_global_norm}"
            )
        if self.precision not in ("single", "double"):
            raise ContractViolation(f"precision must be single or double, got {self.precision!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractViolation(f"val_fraction must be in (0, 1), got {self.val_fraction}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


# ---------------------------------------------------------------------------
# loss


def compute_class_weights(videos: list[VideoSequence]) -> np.ndarray:
    """Per-AU positive-example weight: negatives/positives, clipped to [1, 10].

    An AU with no positive examples at all gets the cap.  Unknown
    labels (-1) are ignored.
    """
    labels = np.concatenate([v.labels_array() for v in videos])
    pos = (labels == 1).sum(axis=0).astype(np.float64)
    neg = (labels == 0).sum(axis=0).astype(np.float64)
    ratio = np.where(pos > 0, neg / np.maximum(pos, 1.0), WEIGHT_CAP)
    return np.clip(ratio, 1.0, WEIGHT_CAP)


def frame_loss(logits: list[Tensor], labels: np.ndarray, weights: np.ndarray):
    """Weighted 2-way cross entropy, averaged over this frame's known labels.

    Weight applies only where the label is 1.  Labels of -1 are
    skipped; if every label is unknown the frame carries no signal and
    None is returned.
    """
    if len(logits) != len(AU_ORDER) or labels.shape != (len(AU_ORDER),):
        raise ContractViolation(
            f"frame_loss: got {len(logits)} logit nodes and labels {labels.shape}"
        )
    terms = []
    for i, lg in enumerate(logits):
        lab = int(labels[i])
        if lab == -1:
            continue
        if lab not in (0, 1):
            raise ContractViolation(f"frame_loss: label {lab} for {AU_ORDER[i]}")
        _, ce = T.softmax_cross_entropy(lg, lab)
        if lab == 1:
            w = float(weights[i])
            if w != 1.0:
                ce = T.scale(ce, w)
        terms.append(ce)
    if not terms:
        return None
    node = terms[0]
    for extra in terms[1:]:
        node = T.add(node, extra)
    return T.scale(node, 1.0 / len(terms))


def cross_entropy_value(logit_values: np.ndarray, label: int) -> float:
    """Loss value straight from logit numbers, for no-graph passes."""
    v = np.asarray(logit_values, dtype=np.float64)
    m = float(v.max())
    return m + float(np.log(np.exp(v - m).sum())) - float(v[label])


def frame_loss_value(logit_values: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    """Same objective as frame_loss, computed outside the graph."""
    acc = 0.0
    n = 0
    for i in range(len(AU_ORDER)):
        lab = int(labels[i])
        if lab == -1:
            continue
        ce = cross_entropy_value(logit_values[i], lab)
        acc += ce * float(weights[i]) if lab == 1 else ce
        n += 1
    return acc / n if n else None


# ---------------------------------------------------------------------------
# optimiser


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients by min(1, max_norm / global_norm); returns the raw norm."""
    if max_norm <= 0:
        raise ContractViolation(f"clip_gradients: max_norm must be > 0, got {max_norm}")
    norm = T.global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(params, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update from the current gradients."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {p.name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_epsilon)


# ---------------------------------------------------------------------------
# train/validation split


def split_videos(videos: list[VideoSequence], seed: int, val_fraction: float):
    """Deterministic video-level split; returns (train_ids, val_ids).

    Videos are keyed by id (corpus file order does not matter) and
    permuted by a seeded RNG; roughly val_fraction of them, at least
    one, become validation.  Needs at least two videos.
    """
    ids = sorted(v.video_id for v in videos)
    if len(ids) != len(set(ids)):
        raise ContractViolation("duplicate video ids in corpus")
    if len(ids) < 2:
        raise ContractViolation(f"need at least 2 videos to split, got {len(ids)}")
    rng = np.random.default_rng([seed, 2])
    perm = rng.permutation(len(ids))
    n_val = min(len(ids) - 1, max(1, int(round(val_fraction * len(ids)))))
    val = {ids[i] for i in perm[:n_val]}
    return [i for i in ids if i not in val], sorted(val)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_f1: float
    val_metric: float


@dataclass
class TrainResult:
    best_params: ModelParams
    final_params: ModelParams
    best_epoch: int
    best_metric: float
    history: list[EpochStats]
    class_weights: np.ndarray
    train_ids: list[str]
    val_ids: list[str]


@dataclass
class _VideoArrays:
    images: np.ndarray  # T x 2 x S x S
    diffs: np.ndarray  # T x 146
    labels: np.ndarray  # T x 8 int8


def _prepare(video: VideoSequence, dtype) -> _VideoArrays:
    images = np.stack([f.image_stack() for f in video.frames]).astype(dtype)
    diffs = landmark_diffs(video).astype(dtype)
    return _VideoArrays(images, diffs, video.labels_array())


def train(
    corpus: list[VideoSequence],
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    on_epoch_end=None,
) -> TrainResult:
    """Train on a corpus; returns best-validation-metric parameters.

    ``on_epoch_end(stats, params)`` runs after each epoch's validation
    pass; it must not mutate the parameters.  The best epoch is the
    first one reaching the highest validation challenge metric.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    model_config.validate()
    train_config.validate()

    train_ids, val_ids = split_videos(corpus, train_config.seed, train_config.val_fraction)
    by_id = {v.video_id: v for v in corpus}
    dtype = train_config.dtype
    train_data = [_prepare(by_id[i], dtype) for i in train_ids]
    val_data = [_prepare(by_id[i], dtype) for i in val_ids]

    if train_config.class_weighting:
        weights = compute_class_weights([by_id[i] for i in train_ids])
    else:
        weights = np.ones(len(AU_ORDER))

    params = ModelParams.init(model_config, train_config.seed, dtype)
    plist = params.all_parameters()
    adam = AdamState.for_params(plist)

    samples = [(vi, t) for vi, video in enumerate(train_data) for t in range(len(video.labels))]
    history: list[EpochStats] = []
    best_params = params.copy()
    best_epoch = -1
    best_metric = -np.inf

    for epoch in range(train_config.epochs):
        rng = np.random.default_rng([train_config.seed, 3, epoch])
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [samples[k] for k in order[start : start + train_config.batch_size]]
            T.zero_grads(plist)
            losses = []
            for vi, t in batch:
                d = train_data[vi]
                res = model_forward(params, d.images[t], d.diffs[t])
                fl = frame_loss(res.logits, d.labels[t], weights)
                if fl is not None:
                    losses.append(fl)
            if not losses:
                raise EmptyBatchError(
                    f"epoch {epoch}, batch {n_batches}: every label in the batch is -1"
                )
            node = losses[0]
            for extra in losses[1:]:
                node = T.add(node, extra)
            batch_node = T.scale(node, 1.0 / len(losses))
            value = float(batch_node.value)
            if not np.isfinite(value):
                raise NumericError(
                    f"training diverged: loss {value} at epoch {epoch}, batch {n_batches}"
                )
            T.backward(batch_node)
            clip_gradients(plist, train_config.grad_clip_global_norm)
            adam_step(plist, adam, train_config)
            epoch_loss += value
            n_batches += 1

        stats = _validate_epoch(epoch, epoch_loss / n_batches, params, val_data, val_ids, weights)
        history.append(stats)
        if stats.val_metric > best_metric:
            best_metric = stats.val_metric
            best_epoch = epoch
            best_params = params.copy()
        if on_epoch_end is not None:
            on_epoch_end(stats, params)

    return TrainResult(
        best_params=best_params,
        final_params=params.copy(),
        best_epoch=best_epoch,
        best_metric=best_metric,
        history=history,
        class_weights=weights,
        train_ids=train_ids,
        val_ids=val_ids,
    )


def _validate_epoch(epoch, train_loss, params, val_data, val_ids, weights) -> EpochStats:
    loss_sum = 0.0
    loss_n = 0
    predictions = {}
    labels = {}
    for vid, d in zip(val_ids, val_data):
        n = len(d.labels)
        probs = np.empty((n, len(AU_ORDER)))
        for t in range(n):
            res = model_forward(params, d.images[t], d.diffs[t])
            probs[t] = res.probs
            lv = frame_loss_value(
                np.stack([lg.value for lg in res.logits]), d.labels[t], weights
            )
            if lv is not None:
                loss_sum += lv
                loss_n += 1
        predictions[vid] = evaluation.binarize(probs)
        labels[vid] = d.labels
    report = evaluation.challenge_metric(predictions, labels)
    return EpochStats(
        epoch=epoch,
        train_loss=float(train_loss),
        val_loss=loss_sum / max(loss_n, 1),
        val_accuracy=report.accuracy,
        val_f1=report.mean_f1,
        val_metric=report.metric,
    )


HISTORY_HEADER = "epoch,train_loss,val_loss,val_accuracy,val_f1,val_metric"


def write_history(history: list[EpochStats], path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [HISTORY_HEADER]
    for s in history:
        lines.append(
            f"{s.epoch},{s.train_loss:.6f},{s.val_loss:.6f},"
            f"{s.val_accuracy:.6f},{s.val_f1:.6f},{s.val_metric:.6f}"
        )
    target.write_text("\n".join(lines) + "\n")
    return target
