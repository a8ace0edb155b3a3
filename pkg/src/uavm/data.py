"""Paired audio/video feature sequences: synthetic generation and archive I/O.

The generator stands in for frozen per-frame extractor outputs. Each class has
a latent centroid; each sample adds a latent component shared by its two
modalities (weight ``av_corr``) and a component private to each modality.
Inside an event window of ``event_span`` frames the latent is projected into
feature space by a modality-specific matrix; every frame also carries a
modality-specific mean vector and Gaussian noise.

UAVF archive layout (all integers little-endian)::

    b"UAVF" | u32 version | u8 split (0 train, 1 eval) | u8 label kind
    (0 class index, 1 multi-hot) | u32 num_classes | u32 record count
    then that many records:
    u32 id length | id bytes (UTF-8) | u8 modality (0 audio, 1 video)
    | label (u32, or ceil(C/8) bitmask bytes) | u32 T | u32 D | T*D float32
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

MAGIC = b"UAVF"
FORMAT_VERSION = 1
SPLITS = ("train", "eval")
_MOD_CODE = {"audio": 0, "video": 1}
_CODE_MOD = {v: k for k, v in _MOD_CODE.items()}


@dataclass
class FeatureSequence:
    features: np.ndarray
    modality: str
    label: Union[int, np.ndarray]
    sample_id: str


@dataclass
class PairedSample:
    sample_id: str
    audio: FeatureSequence
    video: FeatureSequence

    @property
    def label(self):
        return self.audio.label


@dataclass
class Dataset:
    samples: list
    split: str = "train"
    num_classes: int = 0
    multi_label: bool = False

    def __len__(self) -> int:
        return len(self.samples)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.check_pairing()

    def check_pairing(self) -> None:
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DataError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)
            if s.audio.modality != "audio" or s.video.modality != "video":
                raise DataError(f"sample {s.sample_id!r} has mislabelled modalities")
            if s.audio.sample_id != s.sample_id or s.video.sample_id != s.sample_id:
                raise DataError(f"sample {s.sample_id!r} pairs sequences with different ids")
            if not np.array_equal(np.asarray(s.audio.label), np.asarray(s.video.label)):
                raise DataError(f"sample {s.sample_id!r} has different audio and video labels")
            if s.audio.features.shape != s.video.features.shape:
                raise ShapeError(
                    f"sample {s.sample_id!r}: audio {s.audio.features.shape} vs video {s.video.features.shape}"
                )

    @property
    def ids(self) -> list:
        return [s.sample_id for s in self.samples]

    def arrays(self, modality: str) -> np.ndarray:
        """Stacked ``(n, T, D)`` features of one modality."""
        return np.stack([getattr(s, modality).features for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([np.asarray(s.label) for s in self.samples])

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.split, self.num_classes, self.multi_label)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.split, self.num_classes, self.multi_label, len(self)) != (
            other.split,
            other.num_classes,
            other.multi_label,
            len(other),
        ):
            return False
        for a, b in zip(self.samples, other.samples):
            if a.sample_id != b.sample_id or not np.array_equal(np.asarray(a.label), np.asarray(b.label)):
                return False
            for m in ("audio", "video"):
                if not np.array_equal(getattr(a, m).features, getattr(b, m).features):
                    return False
        return True


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthSpec:
    num_classes: int = 10
    samples_per_class: int = 50
    eval_per_class: int = 20
    seq_len: int = 30
    feature_dim: int = 64
    latent_dim: int = 16
    class_sep: float = 4.0
    av_corr: float = 0.5
    noise_std: float = 0.5
    sample_std: float = 1.0
    modality_offset: float = 1.0
    event_span: int = 10
    desync_windows: bool = False
    seed: int = 0

    def validate(self) -> None:
        checks = {
            "num_classes": self.num_classes >= 1,
            "samples_per_class": self.samples_per_class >= 1,
            "eval_per_class": self.eval_per_class >= 0,
            "seq_len": self.seq_len >= 1,
            "feature_dim": self.feature_dim >= 1,
            "latent_dim": self.latent_dim >= 1,
            "class_sep": self.class_sep >= 0,
            "av_corr": 0.0 <= self.av_corr <= 1.0,
            "noise_std": self.noise_std >= 0,
            "sample_std": self.sample_std >= 0,
            "modality_offset": self.modality_offset >= 0,
            "event_span": 1 <= self.event_span <= self.seq_len,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid synthetic spec: {name}={getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthWorld:
    """Seed-determined structure shared by both splits."""

    centroids: np.ndarray  # (C, L)
    projections: dict  # modality -> (L, D)
    offsets: dict  # modality -> (D,)


def build_world(spec: SynthSpec) -> SynthWorld:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    dirs = rng.normal(size=(spec.num_classes, spec.latent_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # unit directions scaled so typical centroid distance is about class_sep
    centroids = dirs * (spec.class_sep / np.sqrt(2.0))
    projections = {m: rng.normal(size=(spec.latent_dim, spec.feature_dim)) / np.sqrt(spec.latent_dim) for m in ("audio", "video")}
    offsets = {}
    for m in ("audio", "video"):
        o = rng.normal(size=spec.feature_dim)
        offsets[m] = o / np.linalg.norm(o) * spec.modality_offset * np.sqrt(spec.feature_dim) / 4
    return SynthWorld(centroids, projections, offsets)


def generate(spec: SynthSpec, split: str = "train") -> Dataset:
    """Deterministic paired dataset for one split.

    Both splits share class centroids and projections; their samples come from
    independent random streams and carry disjoint ids.
    """
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    world = build_world(spec)
    per_class = spec.samples_per_class if split == "train" else spec.eval_per_class
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1 + SPLITS.index(split)]))
    t, d, lat = spec.seq_len, spec.feature_dim, spec.latent_dim
    shared_w, private_w = np.sqrt(spec.av_corr), np.sqrt(1.0 - spec.av_corr)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    samples = []
    for i, c in enumerate(labels):
        sid = f"{split}-{i:06d}"
        shared = rng.normal(size=lat) * spec.sample_std
        start = int(rng.integers(0, t - spec.event_span + 1))
        starts = {"audio": start}
        starts["video"] = int(rng.integers(0, t - spec.event_span + 1)) if spec.desync_windows else start
        seqs = {}
        for m in ("audio", "video"):
            private = rng.normal(size=lat) * spec.sample_std
            latent = world.centroids[c] + shared_w * shared + private_w * private
            feats = np.tile(world.offsets[m], (t, 1))
            feats[starts[m] : starts[m] + spec.event_span] += latent @ world.projections[m]
            feats += rng.normal(size=(t, d)) * spec.noise_std
            seqs[m] = FeatureSequence(feats.astype(np.float32), m, int(c), sid)
        samples.append(PairedSample(sid, seqs["audio"], seqs["video"]))
    return Dataset(samples, split, spec.num_classes, False)


# ---------------------------------------------------------------------------
# UAVF archive


def _encode_label(label, multi_label: bool, num_classes: int) -> bytes:
    if not multi_label:
        return struct.pack("<I", int(label))
    bits = np.zeros(num_classes, dtype=np.uint8)
    bits[: len(label)] = np.asarray(label, dtype=np.uint8) != 0
    return np.packbits(bits, bitorder="little").tobytes()


def dumps_features(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = (FORMAT_VERSION, SPLITS.index(dataset.split), int(dataset.multi_label), dataset.num_classes, 2 * len(dataset))
    buf.write(struct.pack("<IBBII", *header))
    for s in dataset.samples:
        for m in ("audio", "video"):
            seq = getattr(s, m)
            sid = s.sample_id.encode("utf-8")
            buf.write(struct.pack("<I", len(sid)))
            buf.write(sid)
            buf.write(struct.pack("<B", _MOD_CODE[m]))
            buf.write(_encode_label(seq.label, dataset.multi_label, dataset.num_classes))
            feats = np.ascontiguousarray(seq.features, dtype="<f4")
            buf.write(struct.pack("<II", *feats.shape))
            buf.write(feats.tobytes())
    return buf.getvalue()


def save_features(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_features(dataset))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, sample_id=None) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos, sample_id)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str, sample_id=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, sample_id))


def loads_features(data: bytes, feature_dim: Optional[int] = None, seq_len: Optional[int] = None) -> Dataset:
    """Parse a UAVF archive; optional dims are validated against every record."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes, not a UAVF archive", 0)
    version, split_code, label_kind, num_classes, num_records = r.unpack("<IBBII", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported UAVF version {version}", 4)
    if split_code >= len(SPLITS) or label_kind > 1:
        raise FormatError(f"invalid header fields split={split_code} label_kind={label_kind}", 8)
    multi = bool(label_kind)
    nbytes_mask = (num_classes + 7) // 8
    pending: dict = {}
    for _ in range(num_records):
        start = r.pos
        (n,) = r.unpack("<I", "id length")
        try:
            sid = r.take(n, "sample id").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"sample id is not UTF-8: {e}", start) from None
        (mcode,) = r.unpack("<B", "modality", sid)
        if mcode not in _CODE_MOD:
            raise FormatError(f"unknown modality code {mcode}", r.pos - 1, sid)
        if multi:
            raw = np.frombuffer(r.take(nbytes_mask, "label bitmask", sid), dtype=np.uint8)
            label = np.unpackbits(raw, bitorder="little")[:num_classes].astype(np.int64)
        else:
            (label,) = r.unpack("<I", "label", sid)
            if num_classes and label >= num_classes:
                raise FormatError(f"label {label} out of range for {num_classes} classes", r.pos - 4, sid)
        t, d = r.unpack("<II", "shape", sid)
        if feature_dim is not None and d != feature_dim:
            raise ShapeError(f"sample {sid!r}: feature dim {d} does not match configured feature_dim {feature_dim}")
        if seq_len is not None and t != seq_len:
            raise ShapeError(f"sample {sid!r}: sequence length {t} does not match configured seq_len {seq_len}")
        payload_at = r.pos
        feats = np.frombuffer(r.take(4 * t * d, "feature payload", sid), dtype="<f4").reshape(t, d).astype(np.float32)
        if not np.all(np.isfinite(feats)):
            raise FormatError("non-finite value in feature payload", payload_at, sid)
        m = _CODE_MOD[mcode]
        slot = pending.setdefault(sid, {})
        if m in slot:
            raise FormatError(f"duplicate {m} record", start, sid)
        slot[m] = FeatureSequence(feats, m, label, sid)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} unexpected bytes after {num_records} records", r.pos)
    samples = []
    for sid, slot in pending.items():
        if set(slot) != {"audio", "video"}:
            raise DataError(f"sample {sid!r} is missing a modality (has {sorted(slot)})")
        samples.append(PairedSample(sid, slot["audio"], slot["video"]))
    return Dataset(samples, SPLITS[split_code], num_classes, multi)


def load_features(path, feature_dim: Optional[int] = None, seq_len: Optional[int] = None) -> Dataset:
    return loads_features(Path(path).read_bytes(), feature_dim, seq_len)


def write_manifest(datasets, path) -> Path:
    """CSV with one ``sample_id,label,split`` row per sample."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "split"])
        for ds in datasets:
            for s in ds.samples:
                lab = s.label
                if isinstance(lab, np.ndarray):
                    lab = " ".join(str(i) for i in np.flatnonzero(lab))
                w.writerow([s.sample_id, lab, ds.split])
    return path


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Accuracy of a nearest-class-mean classifier (used as a separability oracle)."""
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    dist = ((test_x[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((classes[dist.argmin(axis=1)] == test_y).mean())
