"""The unified audio-visual classifier.

Layout per modality ``m``::

    features (T x D_f) -> row L2 norm -> proj_m -> + pos -> N modal layers (theta_m)
        -> bridge -> N_s shared layers -> mean over time -> classifier   (theta_s)

With ``N = 0`` the bridge maps the normalised features straight into the
shared width and positions are added after it. In ``independent`` mode the
bridge and classifier are per-modality copies and there are no shared layers.
In ``cross_modal_attention`` mode both modalities pass through their own modal
stacks and the shared stack sees the 2T-token concatenation.

Transformer blocks are pre-norm residual blocks with a GELU feed-forward of
width ``ff_mult * D``.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DataError, NumericInputError, ShapeError
from .tensor import Tensor

AUDIO = "audio"
VIDEO = "video"
MODALITIES = (AUDIO, VIDEO)
MODES = ("unified", "independent", "cross_modal_attention")
LOSS_KINDS = ("single_label_ce", "multi_label_bce")


@dataclass
class ModelConfig:
    num_modal_layers: int = 1
    num_shared_layers: int = 2
    total_layers: Optional[int] = None
    modal_dim: int = 64
    shared_dim: int = 64
    num_heads: int = 4
    seq_len: int = 30
    feature_dim: int = 64
    num_classes: int = 10
    mode: str = "unified"
    loss_kind: str = "single_label_ce"
    ff_mult: int = 4
    ln_eps: float = 1e-5
    position_encoding: bool = True
    pos_scale: Optional[float] = None
    per_modality_bridge: bool = False
    fusion: str = "logits"
    init_std: Optional[float] = None
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n, ns = self.num_modal_layers, self.num_shared_layers
        if n < 0 or ns < 0:
            raise ConfigError(f"layer counts must be >= 0, got num_modal_layers={n}, num_shared_layers={ns}")
        if self.total_layers is not None and n + ns != self.total_layers:
            raise ConfigError(
                f"num_modal_layers + num_shared_layers = {n + ns} but total_layers = {self.total_layers}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "independent" and ns != 0:
            raise ConfigError(f"independent mode requires num_shared_layers = 0, got {ns}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        for name in ("modal_dim", "shared_dim", "num_heads", "seq_len", "feature_dim", "num_classes", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.modal_dim % self.num_heads:
            raise ConfigError(f"modal_dim={self.modal_dim} not divisible by num_heads={self.num_heads}")
        if self.shared_dim % self.num_heads:
            raise ConfigError(f"shared_dim={self.shared_dim} not divisible by num_heads={self.num_heads}")
        if self.fusion not in ("logits", "probs"):
            raise ConfigError(f"fusion must be 'logits' or 'probs', got {self.fusion!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be > 0")

    @property
    def depth(self) -> int:
        return self.num_modal_layers + self.num_shared_layers

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter layout


def _block_shapes(prefix: str, d: int, ff: int) -> dict:
    return {
        f"{prefix}ln1.g": (d,),
        f"{prefix}ln1.b": (d,),
        f"{prefix}attn.wq": (d, d),
        f"{prefix}attn.bq": (d,),
        f"{prefix}attn.wk": (d, d),
        f"{prefix}attn.bk": (d,),
        f"{prefix}attn.wv": (d, d),
        f"{prefix}attn.bv": (d,),
        f"{prefix}attn.wo": (d, d),
        f"{prefix}attn.bo": (d,),
        f"{prefix}ln2.g": (d,),
        f"{prefix}ln2.b": (d,),
        f"{prefix}ff.w1": (d, ff * d),
        f"{prefix}ff.b1": (ff * d,),
        f"{prefix}ff.w2": (ff * d, d),
        f"{prefix}ff.b2": (d,),
    }


def parameter_shapes(config: ModelConfig) -> dict:
    """Group name -> {parameter name: shape}, without allocating anything."""
    c = config
    bridge_in = c.modal_dim if c.num_modal_layers > 0 else c.feature_dim
    bridge = {"bridge.w": (bridge_in, c.shared_dim), "bridge.b": (c.shared_dim,)}
    head = {"cls.w": (c.shared_dim, c.num_classes), "cls.b": (c.num_classes,)}

    front: dict = {}
    if c.num_modal_layers > 0:
        front["proj.w"] = (c.feature_dim, c.modal_dim)
        front["proj.b"] = (c.modal_dim,)
    for i in range(c.num_modal_layers):
        front.update(_block_shapes(f"modal.{i}.", c.modal_dim, c.ff_mult))

    shared: dict = {}
    branch_extra: dict = {}
    if c.mode == "independent":
        branch_extra.update(bridge)
        branch_extra.update(head)
    else:
        if c.per_modality_bridge:
            branch_extra.update(bridge)
        else:
            shared.update(bridge)
        for i in range(c.num_shared_layers):
            shared.update(_block_shapes(f"shared.{i}.", c.shared_dim, c.ff_mult))
        shared.update(head)
    branch = {**front, **branch_extra}
    return {"theta_a": dict(branch), "theta_v": dict(branch), "theta_s": shared}


@dataclass
class UAVMParams:
    """The three parameter groups. ``theta_s`` is one dict used by both paths."""

    theta_a: dict = field(default_factory=dict)
    theta_v: dict = field(default_factory=dict)
    theta_s: dict = field(default_factory=dict)

    def groups(self) -> dict:
        return {"theta_a": self.theta_a, "theta_v": self.theta_v, "theta_s": self.theta_s}

    def branch(self, modality: str) -> dict:
        if modality == AUDIO:
            return self.theta_a
        if modality == VIDEO:
            return self.theta_v
        raise ConfigError(f"unknown modality {modality!r}")

    def named(self) -> dict:
        """Flat ``group/name -> Tensor`` view, in a fixed order."""
        return {f"{g}/{n}": t for g, d in self.groups().items() for n, t in d.items()}

    def active(self, modality: str) -> dict:
        """Parameters touched by a forward pass of one modality."""
        g = "theta_a" if modality == AUDIO else "theta_v"
        out = {f"{g}/{n}": t for n, t in self.branch(modality).items()}
        out.update({f"theta_s/{n}": t for n, t in self.theta_s.items()})
        return out

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None

    def checksum(self, group: Optional[str] = None) -> str:
        h = hashlib.sha256()
        items = self.named().items() if group is None else ((f"{group}/{n}", t) for n, t in self.groups()[group].items())
        for name, t in items:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "UAVMParams":
        def dup(d):
            return {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype) for n, t in d.items()}

        return UAVMParams(dup(self.theta_a), dup(self.theta_v), dup(self.theta_s))


def init_params(config: ModelConfig, seed: int = 0) -> UAVMParams:
    """Normal weights, zero biases, unit layer-norm gains.

    Weight std is ``init_std`` when set, else ``1/sqrt(fan_in)``.
    """
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    out = {}
    for group, shapes in parameter_shapes(config).items():
        d = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif leaf.startswith("b"):
                arr = np.zeros(shape)
            else:
                std = config.init_std if config.init_std is not None else 1.0 / np.sqrt(shape[0])
                arr = rng.normal(0.0, std, size=shape)
            d[name] = Tensor(arr.astype(dt), requires_grad=True, dtype=dt, name=f"{group}/{name}")
        out[group] = d
    return UAVMParams(**out)


def count_parameters(params_or_config) -> dict:
    """Exact parameter counts per group plus ``total``.

    Accepts either a :class:`UAVMParams` or a :class:`ModelConfig`; the latter is
    counted from shapes alone so very large configurations need no memory.
    """
    if isinstance(params_or_config, ModelConfig):
        groups = {g: sum(int(np.prod(s)) for s in shapes.values()) for g, shapes in parameter_shapes(params_or_config).items()}
    else:
        groups = {g: sum(t.size for t in d.values()) for g, d in params_or_config.groups().items()}
    groups["total"] = sum(groups.values())
    return groups


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardTrace:
    """Per-layer tokens and attention maps from one forward pass.

    ``layers[0]`` is the projected input; ``layers[i]`` the output of the i-th
    Transformer layer. ``attention[i]`` holds ``(..., heads, T, T)`` maps for
    layer ``i`` (``None`` for layer 0).
    """

    layers: list
    attention: list
    pooled: np.ndarray
    logits: np.ndarray

    def pooled_layer(self, index: int) -> np.ndarray:
        return self.layers[index].mean(axis=-2)

    def squeeze(self) -> "ForwardTrace":
        return ForwardTrace(
            [x[0] for x in self.layers],
            [None if a is None else a[0] for a in self.attention],
            self.pooled[0],
            self.logits[0],
        )


@functools.lru_cache(maxsize=32)
def _sinusoid(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def positional_encoding(t: int, d: int, dtype=np.float64) -> np.ndarray:
    return _sinusoid(t, d).astype(dtype)


def _pos_scale(config: ModelConfig) -> float:
    # projected unit-norm rows have per-entry RMS about 1/sqrt(D_f) at init
    return config.pos_scale if config.pos_scale is not None else 1.0 / np.sqrt(config.feature_dim)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, np.finfo(x.dtype).tiny)


def _block(h: Tensor, p: dict, prefix: str, config: ModelConfig):
    eps = config.ln_eps
    z = tt.layer_norm(h, p[prefix + "ln1.g"], p[prefix + "ln1.b"], eps)
    attn = {k: p[prefix + "attn." + k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    a, probs = tt.multi_head_attention(z, attn, config.num_heads)
    h = h + a
    z = tt.layer_norm(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"], eps)
    f = tt.linear(tt.gelu(tt.linear(z, p[prefix + "ff.w1"], p[prefix + "ff.b1"])), p[prefix + "ff.w2"], p[prefix + "ff.b2"])
    return h + f, probs


def _check_features(features: np.ndarray, config: ModelConfig) -> np.ndarray:
    features = np.asarray(features)
    want = (config.seq_len, config.feature_dim)
    if features.ndim != 3 or features.shape[1:] != want:
        raise ShapeError(f"expected features of shape (batch, {want[0]}, {want[1]}), got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise NumericInputError("features contain NaN or infinite values")
    return l2_normalize_rows(features.astype(config.np_dtype, copy=False))


def _upper(params: UAVMParams, config: ModelConfig, modality: str) -> dict:
    if config.mode == "independent":
        return params.branch(modality)
    return params.theta_s


def _bridge_params(params: UAVMParams, config: ModelConfig, modality: str) -> dict:
    if config.mode == "independent" or config.per_modality_bridge:
        return params.branch(modality)
    return params.theta_s


def _defer_bridge(config: ModelConfig) -> bool:
    # with no shared layers the bridge is affine per token, so it can follow the pooling;
    # the pooled vector is then the mean of the last recorded layer
    if config.num_shared_layers or not config.num_modal_layers:
        return False
    return not (config.mode == "cross_modal_attention" and config.per_modality_bridge)


def _front(params, config, x: np.ndarray, modality: str, layers: list, maps: list) -> Tensor:
    """Input projection plus modal stack; returns the bridged tokens (unbridged when deferred)."""
    dt = config.np_dtype
    branch = params.branch(modality)
    bp = _bridge_params(params, config, modality)
    xt = Tensor(x, dtype=dt)
    if config.num_modal_layers == 0:
        h = tt.linear(xt, bp["bridge.w"], bp["bridge.b"])
        if config.position_encoding:
            h = h + _pos_scale(config) * positional_encoding(x.shape[-2], config.shared_dim, dt)
        layers.append(h)
        maps.append(None)
        return h
    h = tt.linear(xt, branch["proj.w"], branch["proj.b"])
    if config.position_encoding:
        h = h + _pos_scale(config) * positional_encoding(x.shape[-2], config.modal_dim, dt)
    layers.append(h)
    maps.append(None)
    for i in range(config.num_modal_layers):
        h, probs = _block(h, branch, f"modal.{i}.", config)
        layers.append(h)
        maps.append(probs)
    if _defer_bridge(config):
        return h
    return tt.linear(h, bp["bridge.w"], bp["bridge.b"])


def _finish(h: Tensor, upper: dict, config: ModelConfig, layers: list, maps: list, bridge: Optional[dict] = None):
    for i in range(config.num_shared_layers):
        h, probs = _block(h, upper, f"shared.{i}.", config)
        layers.append(h)
        maps.append(probs)
    pooled = tt.mean(h, axis=-2)
    z = pooled if bridge is None else tt.linear(pooled, bridge["bridge.w"], bridge["bridge.b"])
    return tt.linear(z, upper["cls.w"], upper["cls.b"]), pooled


def _make_trace(layers, maps, pooled, logits) -> ForwardTrace:
    return ForwardTrace(
        [t.data for t in layers],
        [m if m is None or isinstance(m, np.ndarray) else m.data for m in maps],
        pooled.data,
        logits.data,
    )


def forward_batch(params: UAVMParams, config: ModelConfig, features: np.ndarray, modality: str, record_trace: bool = False):
    """Single-modality forward over a ``(B, T, D_f)`` batch.

    Returns ``(logits Tensor (B, C), ForwardTrace or None)``.
    """
    if config.mode == "cross_modal_attention":
        raise ConfigError("cross_modal_attention mode needs both modalities; use forward_cross_modal")
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    x = _check_features(features, config)
    layers: list = []
    maps: list = []
    h = _front(params, config, x, modality, layers, maps)
    bridge = _bridge_params(params, config, modality) if _defer_bridge(config) else None
    logits, pooled = _finish(h, _upper(params, config, modality), config, layers, maps, bridge)
    trace = _make_trace(layers, maps, pooled, logits) if record_trace else None
    return logits, trace


def _block_diag(ma: np.ndarray, mv: np.ndarray) -> np.ndarray:
    t = ma.shape[-1]
    out = np.zeros(ma.shape[:-2] + (2 * t, 2 * t), dtype=ma.dtype)
    out[..., :t, :t] = ma
    out[..., t:, t:] = mv
    return out


def forward_cross_modal_batch(params, config, audio: np.ndarray, video: np.ndarray, record_trace: bool = False, order=(AUDIO, VIDEO)):
    """Cross-modal baseline: the shared stack attends over both modalities at once.

    Modal-layer trace entries hold both branches' tokens concatenated along time
    and block-diagonal attention maps.
    """
    if config.mode != "cross_modal_attention":
        raise ConfigError(f"forward_cross_modal requires mode=cross_modal_attention, got {config.mode!r}")
    if audio is None or video is None:
        raise DataError("the cross-modal attention model only works when both modalities are input")
    xs = {AUDIO: _check_features(audio, config), VIDEO: _check_features(video, config)}
    per = {}
    for m in MODALITIES:
        layers: list = []
        maps: list = []
        h = _front(params, config, xs[m], m, layers, maps)
        per[m] = (h, layers, maps)
    first, second = order
    h = tt.concat([per[first][0], per[second][0]], axis=-2)
    layers = [tt.concat([a, b], axis=-2) for a, b in zip(per[first][1], per[second][1])]
    maps = [
        None if a is None else _block_diag(a.data, b.data)
        for a, b in zip(per[first][2], per[second][2])
    ]
    bridge = params.theta_s if _defer_bridge(config) else None
    logits, pooled = _finish(h, params.theta_s, config, layers, maps, bridge)
    trace = _make_trace(layers, maps, pooled, logits) if record_trace else None
    return logits, trace


# ---------------------------------------------------------------------------
# single-sample API


def _features_of(x) -> np.ndarray:
    return np.asarray(getattr(x, "features", x))


def forward_single(params: UAVMParams, config: ModelConfig, x, record_trace: bool = False, modality: Optional[str] = None):
    """Logits (C,) and optional trace for one sample of one modality.

    ``x`` is a FeatureSequence (its ``modality`` selects the branch) or a raw
    ``T x D_f`` array together with ``modality``.
    """
    modality = modality or getattr(x, "modality", None)
    feats = _features_of(x)
    if feats.ndim != 2:
        raise ShapeError(f"expected a {config.seq_len}x{config.feature_dim} feature matrix, got {feats.shape}")
    with tt.no_grad():
        logits, trace = forward_batch(params, config, feats[None], modality, record_trace)
    return logits.data[0], (trace.squeeze() if trace is not None else None)


def forward_cross_modal(params, config, a, v, record_trace: bool = False, order=(AUDIO, VIDEO)):
    if a is None or v is None:
        raise DataError("the cross-modal attention model only works when both modalities are input")
    fa, fv = _features_of(a), _features_of(v)
    with tt.no_grad():
        logits, trace = forward_cross_modal_batch(params, config, fa[None], fv[None], record_trace, order)
    return logits.data[0], (trace.squeeze() if trace is not None else None)


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fuse_predictions(pred_a, pred_v) -> np.ndarray:
    """Elementwise mean of two classifier outputs."""
    pa, pv = np.asarray(pred_a), np.asarray(pred_v)
    if pa.shape != pv.shape:
        raise ShapeError(f"prediction shapes differ: {pa.shape} vs {pv.shape}")
    if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pv))):
        raise NumericInputError("predictions contain non-finite values")
    return (pa + pv) / 2


def infer(params, config, a=None, v=None, fusion: Optional[str] = None) -> np.ndarray:
    """Prediction with fusion when both modalities are given, fallback otherwise.

    With ``fusion="probs"`` the softmax probabilities are averaged instead of the
    logits; a single-modality call always returns raw logits.
    """
    if a is None and v is None:
        raise DataError("infer needs at least one modality")
    if config.mode == "cross_modal_attention":
        return forward_cross_modal(params, config, a, v)[0]
    fusion = fusion or config.fusion
    if v is None:
        return forward_single(params, config, a, modality=AUDIO)[0]
    if a is None:
        return forward_single(params, config, v, modality=VIDEO)[0]
    pa = forward_single(params, config, a, modality=AUDIO)[0]
    pv = forward_single(params, config, v, modality=VIDEO)[0]
    if fusion == "probs":
        return fuse_predictions(softmax_np(pa), softmax_np(pv))
    return fuse_predictions(pa, pv)


def predict_batch(params, config, audio=None, video=None, batch_size: int = 128) -> dict:
    """Batched no-grad logits for evaluation: keys ``audio``, ``video``, ``fused``."""
    out: dict = {}
    with tt.no_grad():
        if config.mode == "cross_modal_attention":
            chunks = [
                forward_cross_modal_batch(params, config, audio[i : i + batch_size], video[i : i + batch_size])[0].data
                for i in range(0, len(audio), batch_size)
            ]
            out["fused"] = np.concatenate(chunks)
            return out
        for m, feats in ((AUDIO, audio), (VIDEO, video)):
            if feats is None:
                continue
            out[m] = np.concatenate(
                [forward_batch(params, config, feats[i : i + batch_size], m)[0].data for i in range(0, len(feats), batch_size)]
            )
    if AUDIO in out and VIDEO in out:
        if config.fusion == "probs":
            out["fused"] = fuse_predictions(softmax_np(out[AUDIO]), softmax_np(out[VIDEO]))
        else:
            out["fused"] = fuse_predictions(out[AUDIO], out[VIDEO])
    return out


def trace_batch(params, config, features: np.ndarray, modality: str, batch_size: int = 128) -> ForwardTrace:
    """No-grad forward with trace over many samples, concatenated along batch."""
    traces = []
    with tt.no_grad():
        for i in range(0, len(features), batch_size):
            traces.append(forward_batch(params, config, features[i : i + batch_size], modality, True)[1])
    return ForwardTrace(
        [np.concatenate([t.layers[j] for t in traces]) for j in range(len(traces[0].layers))],
        [None if traces[0].attention[j] is None else np.concatenate([t.attention[j] for t in traces]) for j in range(len(traces[0].attention))],
        np.concatenate([t.pooled for t in traces]),
        np.concatenate([t.logits for t in traces]),
    )


@dataclass
class UAVM:
    """Config plus parameters, the unit probes and checkpoints work with."""

    config: ModelConfig
    params: UAVMParams
    seed: int = 0

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "UAVM":
        return cls(config, init_params(config, seed), seed)

    def checkpoint_id(self) -> str:
        return self.params.checksum()[:16]

    def forward(self, x, record_trace=False, modality=None):
        return forward_single(self.params, self.config, x, record_trace, modality)

    def infer(self, a=None, v=None, fusion=None):
        return infer(self.params, self.config, a, v, fusion)
