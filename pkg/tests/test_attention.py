import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchstyle.attention import (
    AttentionFeatures,
    FeatureCache,
    InjectionConfig,
    RefFeatures,
    attention_weights,
    injected_attention,
    multihead_attention,
    select_layers,
    smooth_features,
    standard_attention,
)
from sketchstyle.backends import LayerDescriptor


def brute_attention(Q, K, V):
    """Row-by-row softmax attention with explicit loops."""
    out = np.zeros((Q.shape[0], V.shape[1]))
    d_k = K.shape[1]
    for i in range(Q.shape[0]):
        logits = [sum(Q[i, a] * K[j, a] for a in range(d_k)) / math.sqrt(d_k) for j in range(K.shape[0])]
        m = max(logits)
        w = [math.exp(l - m) for l in logits]
        total = sum(w)
        for j in range(K.shape[0]):
            out[i] += w[j] / total * V[j]
    return out


def random_features(rng, tokens, d, dv=None):
    dv = dv or d
    return AttentionFeatures(
        rng.standard_normal((tokens, d)), rng.standard_normal((tokens, d)), rng.standard_normal((tokens, dv))
    )


class TestStandardAttention:
    def test_single_token_returns_value(self):
        f = AttentionFeatures(np.array([[3.0, -1.0]]), np.array([[0.5, 2.0]]), np.array([[7.0, 8.0, 9.0]]))
        np.testing.assert_array_equal(standard_attention(f), [[7.0, 8.0, 9.0]])

    def test_hand_case(self):
        f = AttentionFeatures(np.array([[1.0, 0.0]]), np.eye(2), np.array([[1.0], [2.0]]))
        w1 = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1.0)
        expected = w1 * 1.0 + (1 - w1) * 2.0
        assert standard_attention(f).item() == pytest.approx(expected, abs=1e-12)
        assert standard_attention(f).item() == pytest.approx(1.330, abs=1e-3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        f = random_features(rng, 5, 3, 4)
        np.testing.assert_allclose(standard_attention(f), brute_attention(f.Q, f.K, f.V), atol=1e-12)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(1)
        f = random_features(rng, 6, 4)
        dup = AttentionFeatures(f.Q, np.vstack([f.K, f.K]), np.vstack([f.V, f.V]))
        np.testing.assert_allclose(standard_attention(dup), standard_attention(f), atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        f = random_features(rng, 7, 5)
        np.testing.assert_allclose(attention_weights(f.Q, f.K).sum(axis=1), 1.0, atol=1e-12)

    def test_zero_key_dim(self):
        with pytest.raises(ValueError):
            standard_attention(AttentionFeatures(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 1))))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            AttentionFeatures(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            AttentionFeatures(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 1)))


class TestSmoothing:
    def test_endpoints(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        np.testing.assert_array_equal(smooth_features(a, b, 0.0), b)
        np.testing.assert_array_equal(smooth_features(a, b, 1.0), a)

    def test_midpoint(self):
        np.testing.assert_array_equal(smooth_features(np.array([2.0]), np.array([4.0]), 0.5), [3.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="resolution"):
            smooth_features(np.zeros((4, 3)), np.zeros((5, 3)), 0.5)

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            smooth_features(np.zeros(2), np.zeros(2), 1.5)
        with pytest.raises(ValueError):
            InjectionConfig(lam=-0.1)


class TestInjectedAttention:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.target = random_features(rng, 6, 4)
        self.refs = [RefFeatures(rng.standard_normal((6, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4)))
                     for _ in range(2)]

    def test_none_mode_is_standard(self):
        out = injected_attention(self.target, self.refs, InjectionConfig(mode="none"))
        np.testing.assert_array_equal(out, standard_attention(self.target))

    def test_smoothed_lambda_one_collapses(self):
        cfg = InjectionConfig(lam=1.0, mode="concat_smoothed")
        out = injected_attention(self.target, self.refs[:1], cfg)
        np.testing.assert_allclose(out, standard_attention(self.target), atol=1e-6)

    def test_smoothed_lambda_zero_is_concat(self):
        a = injected_attention(self.target, self.refs[:1], InjectionConfig(lam=0.0, mode="concat_smoothed"))
        b = injected_attention(self.target, self.refs[:1], InjectionConfig(lam=0.0, mode="concat"))
        np.testing.assert_array_equal(a, b)

    def test_two_reference_hand_case(self):
        q = np.array([[1.0, 0.5]])
        target = AttentionFeatures(q, np.array([[0.2, -0.4]]), np.array([[1.0]]))
        refs = [
            RefFeatures(np.array([[1.0, 1.0]]), np.array([[3.0]])),
            RefFeatures(np.array([[-1.0, 2.0]]), np.array([[-2.0]])),
        ]
        out = injected_attention(target, refs, InjectionConfig(mode="concat"))
        keys = [(0.2, -0.4), (1.0, 1.0), (-1.0, 2.0)]
        values = [1.0, 3.0, -2.0]
        logits = [(q[0, 0] * k0 + q[0, 1] * k1) / math.sqrt(2) for k0, k1 in keys]
        w = [math.exp(l) for l in logits]
        expected = sum(wi * v for wi, v in zip(w, values)) / sum(w)
        assert out.item() == pytest.approx(expected, abs=1e-12)

    def test_concat_matches_brute_force_stack(self):
        out = injected_attention(self.target, self.refs, InjectionConfig(mode="concat"))
        K = np.vstack([self.target.K] + [r.K for r in self.refs])
        V = np.vstack([self.target.V] + [r.V for r in self.refs])
        np.testing.assert_allclose(out, brute_attention(self.target.Q, K, V), atol=1e-12)

    def test_smoothed_matches_brute_force_stack(self):
        lam = 0.3
        out = injected_attention(self.target, self.refs, InjectionConfig(lam=lam, mode="concat_smoothed"))
        t = self.target
        K = np.vstack([t.K] + [lam * t.K + (1 - lam) * r.K for r in self.refs])
        V = np.vstack([t.V] + [lam * t.V + (1 - lam) * r.V for r in self.refs])
        np.testing.assert_allclose(out, brute_attention(t.Q, K, V), atol=1e-12)

    def test_kv_swap(self):
        out = injected_attention(self.target, self.refs[:1], InjectionConfig(mode="kv_swap"))
        r = self.refs[0]
        np.testing.assert_allclose(out, brute_attention(self.target.Q, r.K, r.V), atol=1e-12)

    @pytest.mark.parametrize("n", [0, 2])
    def test_kv_swap_needs_single_reference(self, n):
        with pytest.raises(ValueError):
            injected_attention(self.target, self.refs[:n], InjectionConfig(mode="kv_swap"))

    def test_adain_qk_aligns_statistics(self):
        from sketchstyle.modulation import adain

        out = injected_attention(self.target, self.refs[:1], InjectionConfig(mode="adain_qk_concat"))
        t, r = self.target, self.refs[0]
        Q = adain(t.Q, r.Q, channel_axis=-1)
        K = np.vstack([adain(t.K, r.K, channel_axis=-1), r.K])
        np.testing.assert_allclose(out, brute_attention(Q, K, np.vstack([t.V, r.V])), atol=1e-12)

    def test_adain_qk_needs_queries(self):
        refs = [RefFeatures(self.refs[0].K, self.refs[0].V)]
        with pytest.raises(ValueError):
            injected_attention(self.target, refs, InjectionConfig(mode="adain_qk_concat"))

    def test_continuous_in_lambda(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            target = random_features(rng, 5, 3)
            refs = [RefFeatures(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))]
            lam = rng.uniform(0, 0.99)
            a = injected_attention(target, refs, InjectionConfig(lam=lam, mode="concat_smoothed"))
            b = injected_attention(target, refs, InjectionConfig(lam=lam + 1e-7, mode="concat_smoothed"))
            assert np.abs(a - b).max() < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(tokens=st.integers(1, 12), d=st.integers(1, 8), n_refs=st.integers(1, 3), seed=st.integers(0, 10**6))
    def test_stacked_rows_sum_to_one(self, tokens, d, n_refs, seed):
        rng = np.random.default_rng(seed)
        t = random_features(rng, tokens, d)
        K = np.vstack([t.K] + [rng.standard_normal((tokens, d)) for _ in range(n_refs)])
        np.testing.assert_allclose(attention_weights(t.Q, K).sum(axis=1), 1.0, atol=1e-6)


class TestMultihead:
    def test_per_head_stacking(self):
        rng = np.random.default_rng(6)
        q, k, v = (rng.standard_normal((5, 8)) for _ in range(3))
        ref = RefFeatures(rng.standard_normal((5, 8)), rng.standard_normal((5, 8)))
        cfg = InjectionConfig(lam=0.2, mode="concat_smoothed")
        out = multihead_attention(q, k, v, 2, [ref], cfg)
        for h, sl in enumerate((slice(0, 4), slice(4, 8))):
            f = AttentionFeatures(q[:, sl], k[:, sl], v[:, sl])
            head_ref = RefFeatures(ref.K[:, sl], ref.V[:, sl])
            np.testing.assert_array_equal(out[:, sl], injected_attention(f, [head_ref], cfg))

    def test_indivisible_heads(self):
        with pytest.raises(ValueError):
            multihead_attention(np.zeros((2, 5)), np.zeros((2, 5)), np.zeros((2, 5)), 2)


class FakeBackend:
    def __init__(self, descriptors):
        self._d = descriptors

    def attention_layers(self):
        return self._d


SDXL_LIKE = FakeBackend(
    [LayerDescriptor(i, (32, 32) if i < 40 else (64, 64), "decoder") for i in range(72)]
    + [LayerDescriptor(100 + i, (32, 32), "encoder") for i in range(4)]
)


class TestSelectLayers:
    def test_explicit_indices(self):
        ids = [1, 9, 17, 25, 33, 41, 49, 57, 69, 71]
        assert select_layers(SDXL_LIKE, "explicit", ids) == frozenset(ids)

    def test_explicit_unknown(self):
        with pytest.raises(ValueError, match="valid ids"):
            select_layers(SDXL_LIKE, "explicit", [1, 500])

    def test_empty_resolution_set(self):
        assert select_layers(SDXL_LIKE, "by_resolution", []) == frozenset()

    def test_resolution_only_decoder(self):
        ids = select_layers(SDXL_LIKE, "by_resolution", [(32, 32)])
        assert ids == frozenset(range(40))

    def test_toy_backend_all_layers(self, backend):
        ids = select_layers(backend, "by_resolution", [(8, 8)])
        assert ids == frozenset(d.layer_id for d in backend.attention_layers())

    def test_unknown_policy(self, backend):
        with pytest.raises(ValueError):
            select_layers(backend, "by_name", [])


class TestFeatureCache:
    def make_cache(self, with_q=True):
        rng = np.random.default_rng(7)
        cache = FeatureCache()
        for layer in (0, 3):
            for t in (990, 500, 0):
                for r in range(2):
                    q = rng.standard_normal((6, 4)).astype(np.float32) if with_q else None
                    cache.put(layer, t, r, RefFeatures(
                        rng.standard_normal((6, 4)).astype(np.float32),
                        rng.standard_normal((6, 4)).astype(np.float32),
                        q,
                    ))
        return cache

    @pytest.mark.parametrize("with_q", [True, False])
    def test_round_trip_bitwise(self, tmp_path, with_q):
        cache = self.make_cache(with_q)
        cache.save(tmp_path / "c.skfc")
        loaded = FeatureCache.load(tmp_path / "c.skfc")
        assert loaded.entries.keys() == cache.entries.keys()
        for key, refs in cache.entries.items():
            for a, b in zip(refs, loaded.entries[key]):
                assert a.K.tobytes() == b.K.tobytes()
                assert a.V.tobytes() == b.V.tobytes()
                assert (a.Q is None) == (b.Q is None)
                if a.Q is not None:
                    assert a.Q.tobytes() == b.Q.tobytes()

    def test_header_layout(self, tmp_path):
        cache = FeatureCache()
        cache.put(2, 40, 0, RefFeatures(np.ones((1, 2), np.float32), np.full((1, 2), 2.0, np.float32)))
        cache.save(tmp_path / "c.skfc")
        raw = (tmp_path / "c.skfc").read_bytes()
        assert raw[:6] == b"SKFC01"
        assert int.from_bytes(raw[6:10], "little") == 1
        fields = np.frombuffer(raw[10:34], dtype="<i4")
        assert list(fields) == [2, 40, 0, 1, 2, 0]
        np.testing.assert_array_equal(np.frombuffer(raw[34:], dtype="<f4"), [1, 1, 2, 2])

    def test_rejects_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACACHE\x00\x00\x00")
        with pytest.raises(ValueError):
            FeatureCache.load(tmp_path / "x")

    def test_miss(self):
        with pytest.raises(KeyError, match="layer 9"):
            self.make_cache().get(9, 990)

    def test_summary_properties(self):
        cache = self.make_cache()
        assert len(cache) == 12
        assert cache.layer_ids == [0, 3]
        assert cache.timesteps == [990, 500, 0]
        assert cache.num_refs == 2
