import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavm.data import FeatureSequence
from uavm.errors import ConfigError, DataError, NumericInputError, ShapeError
from uavm.model import (
    AUDIO,
    VIDEO,
    UAVM,
    ModelConfig,
    count_parameters,
    forward_cross_modal,
    forward_single,
    fuse_predictions,
    infer,
    init_params,
    parameter_shapes,
    softmax_np,
)

SMALL = dict(seq_len=6, feature_dim=8, modal_dim=8, shared_dim=8, num_classes=5, num_heads=2, dtype="float64")


def make(seed=0, **kw):
    return UAVM.create(ModelConfig(**{**SMALL, **kw}), seed)


def feats(rng, cfg, modality=AUDIO):
    return FeatureSequence(rng.normal(size=(cfg.seq_len, cfg.feature_dim)), modality, 0, "s")


def block_count(d, ff=4):
    """Hand count of one pre-norm block: two LNs, four projections, two FF layers."""
    return 2 * (2 * d) + 4 * (d * d + d) + (d * ff * d + ff * d) + (ff * d * d + d)


def expected_total(cfg: ModelConfig) -> int:
    n, ns, df, dm, s, c = cfg.num_modal_layers, cfg.num_shared_layers, cfg.feature_dim, cfg.modal_dim, cfg.shared_dim, cfg.num_classes
    front = (df * dm + dm + n * block_count(dm)) if n else 0
    bridge = (dm if n else df) * s + s
    head = s * c + c
    if cfg.mode == "independent":
        return 2 * (front + bridge + head)
    return 2 * front + bridge + ns * block_count(s) + head


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestConfig:
    def test_total_depth_enforced(self):
        with pytest.raises(ConfigError, match="total_layers"):
            ModelConfig(num_modal_layers=2, num_shared_layers=2, total_layers=6)
        assert ModelConfig(num_modal_layers=3, num_shared_layers=3, total_layers=6).depth == 6

    def test_independent_requires_no_shared_layers(self):
        with pytest.raises(ConfigError, match="independent"):
            ModelConfig(mode="independent", num_shared_layers=1)

    @pytest.mark.parametrize("field", ["modal_dim", "shared_dim"])
    def test_dims_divisible_by_heads(self, field):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**{field: 30, "num_heads": 4})

    def test_round_trip_and_unknown_keys(self):
        cfg = ModelConfig(**SMALL)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="bogus"):
            ModelConfig.from_dict({"bogus": 1})


class TestForwardSingle:
    def test_deterministic(self, rng):
        m = make()
        x = feats(rng, m.config)
        a, _ = m.forward(x)
        b, _ = m.forward(x)
        assert a.tobytes() == b.tobytes()

    def test_softmax_of_logits_is_distribution(self, rng):
        m = make(seed=3)
        p = softmax_np(m.forward(feats(rng, m.config))[0])
        assert np.all((p > 0) & (p < 1))
        assert abs(p.sum() - 1) < 1e-6

    def test_wrong_shape(self, rng):
        m = make()
        with pytest.raises(ShapeError):
            m.forward(rng.normal(size=(5, 8)), modality=AUDIO)

    def test_nan_input(self, rng):
        m = make()
        x = rng.normal(size=(6, 8))
        x[2, 3] = np.nan
        with pytest.raises(NumericInputError):
            m.forward(x, modality=AUDIO)

    def test_no_parameter_mutation(self, rng):
        m = make()
        before = m.params.checksum()
        m.forward(feats(rng, m.config), record_trace=True)
        assert m.params.checksum() == before

    def test_shared_classifier_is_aliased(self, rng):
        m = make(num_shared_layers=1)
        xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
        la, lv = m.forward(xa)[0], m.forward(xv)[0]
        m.params.theta_s["cls.w"].data[0, 0] += 0.5
        assert not np.array_equal(m.forward(xa)[0], la)
        assert not np.array_equal(m.forward(xv)[0], lv)

    def test_branch_weights_do_not_leak(self, rng):
        m = make()
        xv = feats(rng, m.config, VIDEO)
        lv = m.forward(xv)[0]
        m.params.theta_a["proj.w"].data[:] += 1.0
        assert m.forward(xv)[0].tobytes() == lv.tobytes()


class TestTrace:
    @pytest.mark.parametrize("n,ns", [(0, 2), (1, 1), (2, 0), (0, 0), (3, 1)])
    def test_layer_count_and_pooling(self, rng, n, ns):
        m = make(num_modal_layers=n, num_shared_layers=ns)
        _, tr = m.forward(feats(rng, m.config), record_trace=True)
        assert len(tr.layers) == n + ns + 1
        assert len(tr.attention) == n + ns + 1 and tr.attention[0] is None
        np.testing.assert_allclose(tr.pooled, tr.layers[-1].mean(axis=0), rtol=0, atol=1e-12)

    def test_every_head_map_is_row_stochastic(self, rng):
        m = make(num_modal_layers=2, num_shared_layers=2)
        _, tr = m.forward(feats(rng, m.config), record_trace=True)
        for maps in tr.attention[1:]:
            assert maps.shape == (2, 6, 6)
            np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-6)

    def test_inputs_are_row_normalised(self, rng):
        # with zero projection bias, identity weights and no position signal, layer 0 is the normalised input
        m = make(num_modal_layers=1, position_encoding=False)
        m.params.theta_a["proj.w"].data[:] = np.eye(8)
        x = rng.normal(scale=7.0, size=(6, 8))
        _, tr = m.forward(x, record_trace=True, modality=AUDIO)
        np.testing.assert_allclose(np.linalg.norm(tr.layers[0], axis=1), 1.0, atol=1e-6)


class TestFusion:
    def test_mean(self):
        assert fuse_predictions([1, 3], [3, 1]).tolist() == [2, 2]

    def test_idempotent(self, rng):
        p = rng.normal(size=7)
        np.testing.assert_array_equal(fuse_predictions(p, p), p)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_predictions([1, 2], [1, 2, 3])

    def test_nonfinite(self):
        with pytest.raises(NumericInputError):
            fuse_predictions([1, np.inf], [1, 2])

    def test_argmax_matches_brute_force(self, rng):
        for _ in range(1000):
            a, v = rng.normal(size=6), rng.normal(size=6)
            brute = [(x + y) / 2 for x, y in zip(a.tolist(), v.tolist())]
            assert int(np.argmax(fuse_predictions(a, v))) == max(range(6), key=brute.__getitem__)


class TestInfer:
    def test_missing_modality_is_bit_identical(self, rng):
        m = make()
        xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
        assert infer(m.params, m.config, a=xa).tobytes() == forward_single(m.params, m.config, xa)[0].tobytes()
        assert infer(m.params, m.config, v=xv).tobytes() == forward_single(m.params, m.config, xv)[0].tobytes()

    def test_both_equal_gives_same(self, rng):
        m = make()
        x = rng.normal(size=(6, 8))
        # identical branch weights make the two passes agree exactly
        for name, t in m.params.theta_v.items():
            t.data[:] = m.params.theta_a[name].data
        pa = forward_single(m.params, m.config, x, modality=AUDIO)[0]
        np.testing.assert_array_equal(infer(m.params, m.config, x, x), pa)

    def test_fusion_is_mean_of_logits(self, rng):
        m = make()
        xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
        pa, pv = m.forward(xa)[0], m.forward(xv)[0]
        np.testing.assert_allclose(m.infer(xa, xv), (pa + pv) / 2, rtol=0, atol=1e-12)

    def test_probability_fusion_flag(self, rng):
        m = make()
        xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
        expect = (softmax_np(m.forward(xa)[0]) + softmax_np(m.forward(xv)[0])) / 2
        np.testing.assert_allclose(m.infer(xa, xv, fusion="probs"), expect, atol=1e-12)

    def test_empty_input(self):
        with pytest.raises(DataError):
            make().infer()


class TestCrossModal:
    def test_shapes_and_rows(self, rng):
        m = make(mode="cross_modal_attention", num_modal_layers=1, num_shared_layers=2)
        xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
        logits, tr = forward_cross_modal(m.params, m.config, xa, xv, True)
        assert logits.shape == (5,)
        assert len(tr.layers) == 4
        assert all(h.shape[0] == 12 for h in tr.layers)
        for maps in tr.attention[2:]:
            assert maps.shape == (2, 12, 12)
            np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-6)

    def test_missing_modality(self, rng):
        m = make(mode="cross_modal_attention")
        with pytest.raises(DataError, match="both modalities"):
            m.infer(a=feats(rng, m.config))

    def test_order_invariant_without_position_encoding(self, rng):
        m = make(mode="cross_modal_attention", num_modal_layers=1, num_shared_layers=2, position_encoding=False)
        xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
        av = forward_cross_modal(m.params, m.config, xa, xv, order=(AUDIO, VIDEO))[0]
        va = forward_cross_modal(m.params, m.config, xa, xv, order=(VIDEO, AUDIO))[0]
        np.testing.assert_allclose(av, va, atol=1e-5)

    def test_single_modality_forward_refused(self, rng):
        m = make(mode="cross_modal_attention")
        with pytest.raises(ConfigError):
            m.forward(feats(rng, m.config))


class TestParameters:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(num_modal_layers=1, num_shared_layers=2),
            dict(num_modal_layers=0, num_shared_layers=3),
            dict(num_modal_layers=3, num_shared_layers=0),
            dict(num_modal_layers=4, num_shared_layers=0, mode="independent", shared_dim=4),
            dict(num_modal_layers=2, num_shared_layers=1, modal_dim=12, shared_dim=4, num_heads=4),
        ],
    )
    def test_counts_match_hand_formula(self, kw):
        cfg = ModelConfig(**{**SMALL, **kw})
        counts = count_parameters(cfg)
        assert counts["total"] == expected_total(cfg)
        assert count_parameters(init_params(cfg, 0)) == counts

    def test_unified_smaller_than_independent(self):
        uni = ModelConfig(num_modal_layers=3, num_shared_layers=3)
        ind = ModelConfig(num_modal_layers=6, num_shared_layers=0, mode="independent")
        assert count_parameters(uni)["total"] < count_parameters(ind)["total"]

    def test_zero_modal_layers_have_no_branch_weights(self):
        cfg = ModelConfig(**{**SMALL, "num_modal_layers": 0, "num_shared_layers": 2})
        assert count_parameters(cfg)["theta_a"] == 0
        split = ModelConfig(**{**SMALL, "num_modal_layers": 0, "num_shared_layers": 2, "per_modality_bridge": True})
        assert count_parameters(split)["theta_a"] == 8 * 8 + 8

    def test_fully_shared_and_independent_run(self, rng):
        for kw in (dict(num_modal_layers=0, num_shared_layers=3), dict(num_modal_layers=3, num_shared_layers=0, mode="independent")):
            m = make(**kw)
            assert m.infer(feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)).shape == (5,)

    def test_branches_have_identical_shapes(self):
        shapes = parameter_shapes(ModelConfig(**SMALL))
        assert shapes["theta_a"] == shapes["theta_v"]

    def test_init_is_seeded(self):
        cfg = ModelConfig(**SMALL)
        assert init_params(cfg, 4).checksum() == init_params(cfg, 4).checksum()
        assert init_params(cfg, 4).checksum() != init_params(cfg, 5).checksum()


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_any_split_runs_and_fuses(n, ns, seed):
    m = make(seed=seed % 1000, num_modal_layers=n, num_shared_layers=ns)
    rng = np.random.default_rng(seed)
    xa, xv = feats(rng, m.config, AUDIO), feats(rng, m.config, VIDEO)
    fused = m.infer(xa, xv)
    assert np.all(np.isfinite(fused))
    np.testing.assert_allclose(fused, (m.forward(xa)[0] + m.forward(xv)[0]) / 2, atol=1e-12)
