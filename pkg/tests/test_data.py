import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavm.data import (
    Dataset,
    FeatureSequence,
    PairedSample,
    SynthSpec,
    build_world,
    dumps_features,
    generate,
    load_features,
    loads_features,
    nearest_centroid_accuracy,
    save_features,
    write_manifest,
)
from uavm.errors import ConfigError, DataError, FormatError, ShapeError

TINY = dict(num_classes=3, samples_per_class=4, eval_per_class=2, seq_len=5, feature_dim=6, latent_dim=3, event_span=2)


def brute_nearest_centroid(train_x, train_y, test_x, test_y):
    """Loop-based nearest class mean, independent of the library version."""
    cents = {}
    for c in sorted(set(train_y.tolist())):
        rows = [x for x, y in zip(train_x, train_y) if y == c]
        cents[c] = [sum(col) / len(rows) for col in zip(*rows)]
    hits = 0
    for x, y in zip(test_x, test_y):
        best = min(cents, key=lambda c: sum((a - b) ** 2 for a, b in zip(x, cents[c])))
        hits += best == y
    return hits / len(test_y)


def pooled(ds, modality):
    return ds.arrays(modality).astype(np.float64).mean(axis=1)


@pytest.fixture(scope="module")
def tiny():
    spec = SynthSpec(**TINY)
    return spec, generate(spec, "train"), generate(spec, "eval")


class TestSpec:
    @pytest.mark.parametrize(
        "field,value",
        [("num_classes", 0), ("samples_per_class", 0), ("av_corr", 1.5), ("noise_std", -1.0), ("event_span", 99), ("class_sep", -0.1)],
    )
    def test_invalid_field_named(self, field, value):
        spec = SynthSpec(**{field: value})
        with pytest.raises(ConfigError, match=field):
            generate(spec)

    def test_unknown_split(self):
        with pytest.raises(ConfigError):
            generate(SynthSpec(**TINY), "test")


class TestGenerate:
    def test_deterministic_bytes(self):
        spec = SynthSpec(**TINY, seed=7)
        assert dumps_features(generate(spec)) == dumps_features(generate(spec))
        assert dumps_features(generate(spec)) != dumps_features(generate(SynthSpec(**TINY, seed=8)))

    def test_pairing_and_shapes(self, tiny):
        spec, train, _ = tiny
        assert len(train) == spec.num_classes * spec.samples_per_class
        for s in train.samples:
            assert s.audio.sample_id == s.video.sample_id == s.sample_id
            assert s.audio.label == s.video.label
            assert s.audio.features.shape == s.video.features.shape == (spec.seq_len, spec.feature_dim)
            assert s.audio.features.dtype == np.float32

    def test_splits_are_disjoint(self, tiny):
        _, train, ev = tiny
        assert not set(train.ids) & set(ev.ids)
        assert train.split == "train" and ev.split == "eval"

    def test_noise_free_is_perfectly_separable(self):
        spec = SynthSpec(num_classes=5, samples_per_class=20, eval_per_class=20, noise_std=0.0, class_sep=20.0, av_corr=1.0, seed=3)
        train, ev = generate(spec, "train"), generate(spec, "eval")
        for m in ("audio", "video"):
            acc = brute_nearest_centroid(pooled(train, m), train.labels(), pooled(ev, m), ev.labels())
            assert acc == 1.0

    def test_library_oracle_matches_brute_force(self, tiny):
        _, train, ev = tiny
        for m in ("audio", "video"):
            args = (pooled(train, m), train.labels(), pooled(ev, m), ev.labels())
            assert nearest_centroid_accuracy(*args) == pytest.approx(brute_nearest_centroid(*args))

    @pytest.mark.parametrize("av_corr,check", [(0.0, lambda r: np.all(np.abs(r) < 0.1)), (1.0, lambda r: np.allclose(r, 1.0))])
    def test_cross_modal_latent_correlation(self, av_corr, check):
        # recover each sample latent from its noise-free event window, remove the class centroid,
        # then correlate the audio and video residuals dimension by dimension
        spec = SynthSpec(num_classes=4, samples_per_class=250, noise_std=0.0, modality_offset=0.0, av_corr=av_corr, seed=11)
        ds, world = generate(spec, "train"), build_world(spec)
        labels = ds.labels()
        resid = {}
        for m in ("audio", "video"):
            signal = ds.arrays(m).astype(np.float64).sum(axis=1) / spec.event_span
            latent = np.linalg.lstsq(world.projections[m].T, signal.T, rcond=None)[0].T
            resid[m] = latent - world.centroids[labels]
        r = np.array([np.corrcoef(resid["audio"][:, j], resid["video"][:, j])[0, 1] for j in range(spec.latent_dim)])
        assert len(ds) == 1000
        assert check(r), r

    def test_separability_monotone_in_class_sep(self):
        for seed in range(3):
            accs = []
            for sep in (0.5, 2.0, 8.0):
                spec = SynthSpec(num_classes=5, samples_per_class=30, eval_per_class=30, class_sep=sep, seed=seed)
                train, ev = generate(spec, "train"), generate(spec, "eval")
                accs.append(brute_nearest_centroid(pooled(train, "audio"), train.labels(), pooled(ev, "audio"), ev.labels()))
            assert accs == sorted(accs), (seed, accs)

    def test_synchronised_event_windows(self):
        spec = SynthSpec(**{**TINY, "noise_std": 0.0, "modality_offset": 0.0})
        for s in generate(spec).samples:
            on_a = np.flatnonzero(np.abs(s.audio.features).sum(axis=1) > 0)
            on_v = np.flatnonzero(np.abs(s.video.features).sum(axis=1) > 0)
            assert on_a.tolist() == on_v.tolist()
            assert len(on_a) == spec.event_span


class TestArchive:
    def test_round_trip(self, tiny, tmp_path):
        _, train, _ = tiny
        path = save_features(train, tmp_path / "train.uavf")
        back = load_features(path)
        assert back == train
        assert dumps_features(back) == path.read_bytes()

    def test_multi_label_round_trip(self):
        rng = np.random.default_rng(0)
        samples = []
        for i in range(4):
            lab = (rng.random(11) < 0.3).astype(np.int64)
            pair = [FeatureSequence(rng.normal(size=(3, 2)).astype(np.float32), m, lab, f"x{i}") for m in ("audio", "video")]
            samples.append(PairedSample(f"x{i}", *pair))
        ds = Dataset(samples, "eval", 11, True)
        assert loads_features(dumps_features(ds)) == ds

    def test_every_truncation_reports_offset(self, tiny):
        _, _, ev = tiny
        blob = dumps_features(ev)
        for cut in list(range(0, 40)) + [len(blob) - 1, len(blob) // 2]:
            with pytest.raises(FormatError, match="byte offset"):
                loads_features(blob[:cut])

    def test_bad_magic(self, tiny):
        blob = bytearray(dumps_features(tiny[1]))
        blob[0:4] = b"NOPE"
        with pytest.raises(FormatError, match="magic"):
            loads_features(bytes(blob))

    def test_dimension_mismatch_names_both(self, tiny):
        blob = dumps_features(tiny[2])
        with pytest.raises(ShapeError, match=r"6.*64"):
            loads_features(blob, feature_dim=64)
        with pytest.raises(ShapeError, match=r"5.*30"):
            loads_features(blob, seq_len=30)

    def test_nan_payload_names_sample(self, tiny):
        _, _, ev = tiny
        blob = bytearray(dumps_features(ev))
        # first record: header(18) + id length(4) + id + modality(1) + label(4) + T,D(8)
        sid = ev.samples[0].sample_id
        at = 18 + 4 + len(sid) + 1 + 4 + 8
        blob[at : at + 4] = struct.pack("<f", float("nan"))
        with pytest.raises(FormatError, match=sid):
            loads_features(bytes(blob))

    def test_missing_modality(self, tiny):
        _, _, ev = tiny
        one = Dataset(ev.samples[:1], "eval", ev.num_classes)
        blob = bytearray(dumps_features(one))
        # keep the header and the audio record only, with the record count set to 1
        sid = one.samples[0].sample_id
        rec = 4 + len(sid) + 1 + 4 + 8 + 4 * 5 * 6
        blob[14:18] = struct.pack("<I", 1)
        with pytest.raises(DataError, match="missing"):
            loads_features(bytes(blob[: 18 + rec]))

    def test_trailing_bytes(self, tiny):
        with pytest.raises(FormatError, match="unexpected bytes"):
            loads_features(dumps_features(tiny[2]) + b"\0")

    def test_manifest(self, tiny, tmp_path):
        _, train, ev = tiny
        path = write_manifest([train, ev], tmp_path / "m.csv")
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == len(train) + len(ev)
        assert {r["split"] for r in rows} == {"train", "eval"}
        assert rows[0]["sample_id"] == train.ids[0] and int(rows[0]["label"]) == train.samples[0].label


@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(1, 5))
@settings(max_examples=20, deadline=None)
def test_archive_round_trip_property(seed, av_corr, span):
    spec = SynthSpec(**{**TINY, "seed": seed, "av_corr": av_corr, "event_span": span})
    ds = generate(spec, "eval")
    blob = dumps_features(ds)
    assert loads_features(blob, spec.feature_dim, spec.seq_len) == ds
    assert dumps_features(loads_features(blob)) == blob
