"""Stochastic single-modality training.

Each iteration draws one uniform number: below ``lambda_mt`` the whole batch is
audio, otherwise video. Only the active branch and the shared parameters get
gradients and optimizer updates, so the other branch is left bit-identical.
The cross-modal baseline has no per-modality path and trains on both inputs
every iteration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tt
from .data import Dataset
from .errors import ConfigError, DataError, NumericError, NumericInputError
from .model import AUDIO, VIDEO, ModelConfig, UAVMParams, forward_batch, forward_cross_modal_batch, predict_batch
from .optim import Adam, step_decay


@dataclass
class TrainConfig:
    lambda_mt: float = 0.5
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    epochs: int = 20
    mixup_alpha: float = 0.5
    label_smoothing: float = 0.1
    time_shift: bool = True
    balanced_sampling: bool = False
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lambda_mt <= 1.0:
            raise ConfigError(f"lambda_mt must lie in [0, 1], got {self.lambda_mt}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.mixup_alpha < 0:
            raise ConfigError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        step_decay(self.lr, self.lr_decay, self.lr_decay_every, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    seed: int = 0

    def audio_fraction(self) -> float:
        mods = [r["modality"] for r in self.iterations]
        return mods.count(AUDIO) / len(mods) if mods else float("nan")

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "epoch", "modality", "loss", "lr", "seed"])
            for r in self.iterations:
                w.writerow([r["iteration"], r["epoch"], r["modality"], repr(r["loss"]), repr(r["lr"]), self.seed])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps({"seed": self.seed, "epochs": self.epochs}, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# sampling and augmentation


def sample_modality(lambda_mt: float, rng: np.random.Generator) -> str:
    """Audio with probability ``lambda_mt``; uses exactly one uniform draw."""
    if not 0.0 <= lambda_mt <= 1.0:
        raise ConfigError(f"lambda_mt must lie in [0, 1], got {lambda_mt}")
    return AUDIO if rng.uniform() < lambda_mt else VIDEO


def smooth_labels(label: int, eps: float, num_classes: int) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"label smoothing eps must lie in [0, 1), got {eps}")
    if not 0 <= int(label) < num_classes or int(label) != label:
        raise DataError(f"class index {label} invalid for {num_classes} classes")
    out = np.full(num_classes, eps / num_classes)
    out[int(label)] += 1.0 - eps
    return out


def smooth_multi_hot(targets: np.ndarray, eps: float) -> np.ndarray:
    """Binary smoothing for multi-label targets: y(1 - eps) + eps/2."""
    return targets * (1.0 - eps) + eps / 2


def random_time_shift(x, rng: np.random.Generator, offset: Optional[int] = None):
    """Circularly roll the time axis by ``offset`` (uniform in [0, T) if omitted).

    Accepts a FeatureSequence (returns a new one, label unchanged) or an array
    whose second-to-last axis is time.
    """
    feats = getattr(x, "features", x)
    t = feats.shape[-2]
    k = int(rng.integers(0, t)) if offset is None else int(offset) % t
    rolled = np.roll(feats, k, axis=-2)
    if hasattr(x, "features"):
        return type(x)(rolled, x.modality, x.label, x.sample_id)
    return rolled


def mixup_batch(features: np.ndarray, targets: np.ndarray, alpha: float, rng: np.random.Generator, lam=None, perm=None):
    """Mix each sample with an in-batch partner using per-sample Beta(alpha, alpha).

    ``lam``/``perm`` may be supplied to reuse draws (cross-modal batches mix both
    modalities identically). Returns ``(features, targets, lam, perm)``.
    """
    if alpha < 0:
        raise ConfigError(f"mixup alpha must be >= 0, got {alpha}")
    n = features.shape[0]
    if alpha == 0 and lam is None:
        return features, targets, np.ones(n), np.arange(n)
    if perm is None:
        perm = rng.permutation(n)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=n)
    lam = np.asarray(lam, dtype=np.float64)
    lx = lam.reshape((n,) + (1,) * (features.ndim - 1)).astype(features.dtype)
    ly = lam.reshape((n,) + (1,) * (targets.ndim - 1))
    mixed_x = lx * features + (1 - lx) * features[perm]
    mixed_y = ly * targets + (1 - ly) * targets[perm]
    return mixed_x, mixed_y, lam, perm


def balanced_weights(labels: np.ndarray) -> np.ndarray:
    """Sampling probabilities proportional to inverse class frequency."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        counts = np.bincount(labels)
        w = 1.0 / counts[labels]
    else:
        freq = labels.sum(axis=0).astype(np.float64)
        inv = np.where(freq > 0, 1.0 / np.maximum(freq, 1), 0.0)
        w = (labels * inv).sum(axis=1)
        w = np.where(w > 0, w, inv[inv > 0].min() if np.any(inv > 0) else 1.0)
    return w / w.sum()


class BatchSampler:
    """Epoch-wise permutation batches, or inverse-frequency draws with replacement."""

    def __init__(self, labels: np.ndarray, batch_size: int, balanced: bool, rng: np.random.Generator):
        self.n = len(labels)
        self.batch_size = batch_size
        self.balanced = balanced
        self.rng = rng
        self.weights = balanced_weights(labels) if balanced else None
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        b = min(self.batch_size, self.n)
        if self.balanced:
            return self.rng.choice(self.n, size=b, replace=True, p=self.weights)
        if len(self._order) < b:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:b], self._order[b:]
        return idx


# ---------------------------------------------------------------------------
# training


def _targets(labels: np.ndarray, model_config: ModelConfig, eps: float) -> np.ndarray:
    if model_config.loss_kind == "multi_label_bce":
        return smooth_multi_hot(labels.astype(np.float64), eps)
    return np.stack([smooth_labels(int(y), eps, model_config.num_classes) for y in labels])


def _loss(logits, targets, model_config: ModelConfig):
    t = targets.astype(logits.dtype)
    if model_config.loss_kind == "multi_label_bce":
        return tt.bce_with_logits(logits, t)
    return tt.cross_entropy(logits, t)


def train_step(params: UAVMParams, model_config: ModelConfig, batch: dict, optimizer: Adam, lr: float) -> float:
    """One optimizer step on a single-modality batch.

    ``batch`` has ``modality``, ``features`` ``(B, T, D_f)`` and ``targets``
    ``(B, C)``; cross-modal models take ``audio``/``video`` instead of
    ``features``. Returns the loss before the update.
    """
    mods = batch.get("modality")
    cross = model_config.mode == "cross_modal_attention"
    if not cross:
        if isinstance(mods, (list, tuple, np.ndarray)):
            if len(set(mods)) != 1:
                raise DataError(f"mixed-modality batch {sorted(set(mods))}: one modality per iteration")
            mods = mods[0]
        if mods not in (AUDIO, VIDEO):
            raise DataError(f"batch modality must be audio or video, got {mods!r}")
    # inputs are validated before this point, so a non-finite value inside the network is a training failure
    for x in ([batch["audio"], batch["video"]] if cross else [batch["features"]]):
        if not np.all(np.isfinite(x)):
            raise NumericInputError("batch features contain NaN or infinite values")
    active = params.named() if cross else params.active(mods)
    params.zero_grad()
    try:
        if cross:
            logits, _ = forward_cross_modal_batch(params, model_config, batch["audio"], batch["video"])
        else:
            logits, _ = forward_batch(params, model_config, batch["features"], mods)
        loss = _loss(logits, batch["targets"], model_config)
    except NumericInputError as e:
        raise NumericError(f"non-finite activations during training: {e}") from e
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    loss.backward()
    optimizer.step(active, lr=lr)
    params.zero_grad()
    return value


def evaluate(params: UAVMParams, model_config: ModelConfig, dataset: Dataset) -> dict:
    """Audio, video and fused accuracy (mAP for multi-label), no augmentation."""
    audio, video = dataset.arrays(AUDIO), dataset.arrays(VIDEO)
    labels = dataset.labels()
    preds = predict_batch(params, model_config, audio, video)
    out = {}
    for key in ("audio", "video", "fused"):
        if key not in preds:
            out[f"{key}_acc"] = None
            continue
        if model_config.loss_kind == "multi_label_bce":
            out[f"{key}_map"] = mean_average_precision(preds[key], labels)
        else:
            out[f"{key}_acc"] = float((preds[key].argmax(axis=1) == labels).mean())
    return out


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    aps = []
    for c in range(targets.shape[1]):
        y = targets[:, c]
        if y.sum() == 0:
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        hits = y[order]
        prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
        aps.append(float((prec * hits).sum() / hits.sum()))
    return float(np.mean(aps)) if aps else float("nan")


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def run_training(
    params: UAVMParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: Dataset,
    eval_dataset: Optional[Dataset] = None,
    log_every: int = 1,
):
    """Train in place for ``epochs * ceil(n / batch_size)`` iterations.

    Returns ``(params, TrainLog)``; the params are the last-epoch weights.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    tc = train_config
    log = TrainLog(seed=tc.seed)
    if tc.epochs == 0:
        return params, log
    streams = np.random.SeedSequence(tc.seed).spawn(3)
    modality_rng = np.random.default_rng(streams[0])
    batch_rng = np.random.default_rng(streams[1])
    aug_rng = np.random.default_rng(streams[2])

    arrays = {AUDIO: dataset.arrays(AUDIO), VIDEO: dataset.arrays(VIDEO)}
    labels = dataset.labels()
    sampler = BatchSampler(labels, tc.batch_size, tc.balanced_sampling, batch_rng)
    optimizer = Adam(lr=tc.lr, betas=tc.betas, eps=tc.adam_eps)
    cross = model_config.mode == "cross_modal_attention"
    it = 0
    for epoch in range(tc.epochs):
        lr = step_decay(tc.lr, tc.lr_decay, tc.lr_decay_every, epoch)
        for _ in range(steps_per_epoch(len(dataset), tc.batch_size)):
            modality = "both" if cross else sample_modality(tc.lambda_mt, modality_rng)
            idx = sampler.next()
            targets = _targets(labels[idx], model_config, tc.label_smoothing)
            shifts = aug_rng.integers(0, model_config.seq_len, size=len(idx)) if tc.time_shift else None
            mods = (AUDIO, VIDEO) if cross else (modality,)
            feats = {}
            for m in mods:
                x = arrays[m][idx]
                if shifts is not None:
                    x = np.stack([np.roll(xi, k, axis=0) for xi, k in zip(x, shifts)])
                feats[m] = x
            if tc.mixup_alpha > 0:
                lam, perm = None, None
                mixed_targets = targets
                for m in mods:
                    feats[m], mixed_targets, lam, perm = mixup_batch(feats[m], targets, tc.mixup_alpha, aug_rng, lam, perm)
                targets = mixed_targets
            batch = {"modality": modality, "targets": targets}
            if cross:
                batch.update(audio=feats[AUDIO], video=feats[VIDEO])
            else:
                batch["features"] = feats[modality]
            loss = train_step(params, model_config, batch, optimizer, lr)
            if it % log_every == 0:
                log.iterations.append({"iteration": it, "epoch": epoch, "modality": modality, "loss": loss, "lr": lr})
            it += 1
        record = {"epoch": epoch, "lr": lr}
        if eval_dataset is not None and len(eval_dataset):
            record.update(evaluate(params, model_config, eval_dataset))
        log.epochs.append(record)
    return params, log
