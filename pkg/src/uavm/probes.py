"""Representation probes: modality classification, A-V retrieval, attention maps.

Every probe runs the model without gradients and reads the recorded trace;
weights are never modified. Layer ``0`` is the projected input and layer
``i`` the output of the i-th Transformer layer; representations are the
token means of a layer.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, PairedSample
from .errors import ConfigError, DataError
from .model import AUDIO, VIDEO, UAVM, forward_single, trace_batch

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["probe", "results", "seed", "checkpoint_id", "settings"],
    "properties": {
        "probe": {"type": "string", "enum": ["modality", "retrieval", "attention_mae", "heatmap", "embeddings"]},
        "results": {"type": "object"},
        "seed": {"type": "integer"},
        "checkpoint_id": {"type": "string"},
        "settings": {"type": "object"},
    },
    "additionalProperties": False,
}


@dataclass
class ProbeReport:
    probe: str
    results: dict
    seed: int
    checkpoint_id: str
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class LinearProbe:
    """Logistic regression on standardised inputs."""

    weight: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    iterations: int = 500
    l2: float = 1e-4

    def decision(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int64)

    def sorted_coefficients(self) -> np.ndarray:
        """Coefficients ordered by decreasing magnitude."""
        return self.weight[np.argsort(-np.abs(self.weight), kind="stable")]


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-4, iterations: int = 500, standardize: bool = True) -> LinearProbe:
    """Full-batch gradient descent on the L2-penalised logistic loss.

    Features are standardised with the training statistics; the step size is
    the inverse of the loss's gradient Lipschitz bound.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = x.mean(axis=0)
    scale = x.std(axis=0) if standardize else np.ones(x.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    z = (x - mean) / scale
    n, d = z.shape
    lipschitz = 0.25 * (np.linalg.norm(z, 2) ** 2 + n) / n + l2
    step = 1.0 / lipschitz
    w = np.zeros(d)
    b = 0.0
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(z @ w + b)))
        r = p - y
        w -= step * (z.T @ r / n + l2 * w)
        b -= step * r.mean()
    return LinearProbe(w, float(b), mean, scale, iterations, l2)


# ---------------------------------------------------------------------------
# representations


def _require_per_modality(model: UAVM) -> None:
    if model.config.mode == "cross_modal_attention":
        raise ConfigError("per-modality probes need a unified or independent model; cross-modal maps are joint")


def _check_layer(model: UAVM, layer_index: int) -> None:
    if not 0 <= layer_index <= model.config.depth:
        raise ConfigError(f"layer_index {layer_index} outside [0, {model.config.depth}]")


def layer_representations(model: UAVM, dataset: Dataset, layer_indices: Sequence[int]) -> dict:
    """``{modality: {layer: (n, D) pooled representations}}``."""
    _require_per_modality(model)
    for li in layer_indices:
        _check_layer(model, li)
    out = {}
    for m in (AUDIO, VIDEO):
        trace = trace_batch(model.params, model.config, dataset.arrays(m), m)
        out[m] = {li: trace.pooled_layer(li) for li in layer_indices}
    return out


def probe_split(n: int, seed: int) -> tuple:
    """Sample indices for the probe's training and test halves."""
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def fit_modality_probe(reps_audio: np.ndarray, reps_video: np.ndarray, seed: int, l2: float = 1e-4, iterations: int = 500, standardize: bool = True):
    """Train audio-vs-video logistic regression on half of the samples.

    Row ``i`` of both arrays belongs to sample ``i``; a sample's two rows always
    land in the same half. Returns ``(held-out accuracy, LinearProbe)``.
    """
    n = len(reps_audio)
    if len(reps_video) != n:
        raise DataError(f"audio has {n} representations but video has {len(reps_video)}")
    train, test = probe_split(n, seed)
    if len(train) < 2 or len(test) < 2:
        raise DataError(f"modality probe needs at least 2 samples per modality in each half, got n={n}")
    x_tr = np.concatenate([reps_audio[train], reps_video[train]])
    y_tr = np.concatenate([np.zeros(len(train)), np.ones(len(train))])
    x_te = np.concatenate([reps_audio[test], reps_video[test]])
    y_te = np.concatenate([np.zeros(len(test)), np.ones(len(test))])
    probe = fit_logistic(x_tr, y_tr, l2, iterations, standardize)
    return float((probe.predict(x_te) == y_te).mean()), probe


def modality_probe(model: UAVM, dataset_eval: Dataset, layer_index: int, seed: int = 0) -> float:
    """Held-out accuracy of predicting the input modality from one layer."""
    reps = layer_representations(model, dataset_eval, [layer_index])
    return fit_modality_probe(reps[AUDIO][layer_index], reps[VIDEO][layer_index], seed)[0]


# ---------------------------------------------------------------------------
# retrieval


def recall_at_k(emb_audio: np.ndarray, emb_video: np.ndarray, k_list=(1, 5, 10)) -> dict:
    """Paired cross-modal retrieval by cosine similarity.

    Row ``i`` of each matrix is a pair. Returns ``{k: (audio->video, video->audio)}``.
    Pairs with a zero-norm side are dropped with a warning.
    """
    a = np.asarray(emb_audio, dtype=np.float64)
    v = np.asarray(emb_video, dtype=np.float64)
    na, nv = np.linalg.norm(a, axis=1), np.linalg.norm(v, axis=1)
    keep = (na > 0) & (nv > 0)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"retrieval: excluded {dropped} pair(s) with zero-norm representations", stacklevel=2)
    a, v = a[keep] / na[keep, None], v[keep] / nv[keep, None]
    n = len(a)
    if n == 0:
        raise DataError("retrieval needs at least one non-degenerate pair")
    sim = a @ v.T
    diag = np.diag(sim)
    # rank = number of candidates strictly more similar than the true partner
    rank_a2v = (sim > diag[:, None]).sum(axis=1)
    rank_v2a = (sim > diag[None, :]).sum(axis=0)
    return {int(k): (float((rank_a2v < k).mean()), float((rank_v2a < k).mean())) for k in k_list}


def retrieval_recall(model: UAVM, dataset_eval: Dataset, layer_index: int, k_list=(1, 5, 10)) -> dict:
    reps = layer_representations(model, dataset_eval, [layer_index])
    return recall_at_k(reps[AUDIO][layer_index], reps[VIDEO][layer_index], k_list)


def balanced_subset(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """First ``per_class`` samples of each class after a seeded shuffle."""
    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    if labels.ndim != 1:
        raise DataError("balanced subsets need single-label data")
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise DataError(f"class {c} has only {len(idx)} samples, {per_class} requested")
        chosen.extend(rng.permutation(idx)[:per_class].tolist())
    return dataset.subset(sorted(chosen))


# ---------------------------------------------------------------------------
# attention


def map_mae(maps_audio: np.ndarray, maps_video: np.ndarray) -> float:
    """Mean absolute entrywise difference, heads paired by index."""
    if maps_audio.shape != maps_video.shape:
        raise DataError(f"attention map shapes differ: {maps_audio.shape} vs {maps_video.shape}")
    return float(np.abs(maps_audio - maps_video).mean())


def _last_layer_maps(model: UAVM, sample: PairedSample):
    _require_per_modality(model)
    if model.config.depth == 0:
        raise ConfigError("model has no Transformer layers, so no attention maps")
    _, ta = forward_single(model.params, model.config, sample.audio, True, AUDIO)
    _, tv = forward_single(model.params, model.config, sample.video, True, VIDEO)
    return ta.attention[-1], tv.attention[-1]


def attention_mae(model: UAVM, paired_sample: PairedSample) -> float:
    """MAE between last-layer attention maps of a sample's audio and video."""
    return map_mae(*_last_layer_maps(model, paired_sample))


def attention_mae_dataset(model: UAVM, dataset: Dataset) -> float:
    """Mean of :func:`attention_mae` over a dataset, computed in batches."""
    _require_per_modality(model)
    if model.config.depth == 0:
        raise ConfigError("model has no Transformer layers, so no attention maps")
    ta = trace_batch(model.params, model.config, dataset.arrays(AUDIO), AUDIO)
    tv = trace_batch(model.params, model.config, dataset.arrays(VIDEO), VIDEO)
    per_sample = np.abs(ta.attention[-1] - tv.attention[-1]).mean(axis=(1, 2, 3))
    return float(per_sample.mean())


def column_mean(maps: np.ndarray) -> np.ndarray:
    """Attention received per time step: mean over query rows."""
    return maps.mean(axis=-2)


def temporal_attention_heatmap(model: UAVM, sample: PairedSample, layer_index: Optional[int] = None) -> dict:
    """``{"audio": (heads, T), "video": (heads, T)}`` attention received per frame."""
    _require_per_modality(model)
    li = model.config.depth if layer_index is None else layer_index
    _check_layer(model, li)
    if li == 0:
        raise ConfigError("layer 0 is the projected input and has no attention map")
    out = {}
    for m in (AUDIO, VIDEO):
        _, tr = forward_single(model.params, model.config, getattr(sample, m), True, m)
        out[m] = column_mean(tr.attention[li])
    return out


def write_heatmap_csv(heatmap: dict, path, sample_id: str = "") -> Path:
    return write_heatmaps_csv([(sample_id, heatmap)], path)


def write_heatmaps_csv(items, path) -> Path:
    """One row per ``(sample, modality, head, t)`` from ``(sample_id, heatmap)`` pairs."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "modality", "head", "t", "attention"])
        for sample_id, heatmap in items:
            for m in (AUDIO, VIDEO):
                for h, row in enumerate(heatmap[m]):
                    for t, val in enumerate(row):
                        w.writerow([sample_id, m, h, t, repr(float(val))])
    return path


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(model: UAVM, dataset_eval: Dataset, layer_indices: Sequence[int], path) -> Path:
    """CSV of pooled representations with ``sample_id, modality, label, layer, e0..``."""
    reps = layer_representations(model, dataset_eval, list(layer_indices))
    labels = dataset_eval.labels()
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        width = max(reps[AUDIO][li].shape[1] for li in layer_indices)
        w.writerow(["sample_id", "modality", "label", "layer"] + [f"e{j}" for j in range(width)])
        for li in layer_indices:
            for m in (AUDIO, VIDEO):
                for sid, lab, row in zip(dataset_eval.ids, labels, reps[m][li]):
                    lab_s = " ".join(map(str, np.flatnonzero(lab))) if np.ndim(lab) else str(int(lab))
                    vals = [repr(float(x)) for x in row] + [""] * (width - len(row))
                    w.writerow([sid, m, lab_s, li] + vals)
    return path


def load_embeddings(path) -> dict:
    """Inverse of :func:`export_embeddings`: ``{layer: {modality: (ids, array)}}``."""
    out: dict = {}
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            sid, m, _, li = row[:4]
            vals = [float(x) for x in row[4:] if x != ""]
            ids, rows = out.setdefault(int(li), {}).setdefault(m, ([], []))
            ids.append(sid)
            rows.append(vals)
    return {li: {m: (ids, np.array(rows)) for m, (ids, rows) in d.items()} for li, d in out.items()}
