import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glm_align.errors import InputError, NumericError
from glm_align.evaluation import (
    FeatureStats,
    clip_style_score,
    evaluate_sets,
    feature_stats,
    frechet_distance,
    layer_sweep,
    merge_stats,
    sqrt_psd,
)
from glm_align.inference import Pipeline, Round, interleave_generate


def stats(mean, cov, n=10):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), n)


class TestStats:
    def test_identical_vectors_zero_cov(self):
        s = feature_stats([[1.0, 2.0], [1.0, 2.0]])
        assert np.array_equal(s.cov, np.zeros((2, 2)))

    def test_hand_example(self):
        s = feature_stats([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_array_equal(s.mean, [1.0, 0.0])
        np.testing.assert_array_equal(s.cov, [[2.0, 0.0], [0.0, 0.0]])

    def test_order_invariance(self):
        x = np.random.default_rng(0).normal(size=(20, 3))
        a, b = feature_stats(x), feature_stats(x[::-1])
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-14)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-14)

    def test_merge_equals_pooled(self):
        x = np.random.default_rng(1).normal(size=(30, 4))
        merged = merge_stats(feature_stats(x[:11]), feature_stats(x[11:]))
        full = feature_stats(x)
        assert merged.count == 30
        np.testing.assert_allclose(merged.mean, full.mean, atol=1e-13)
        np.testing.assert_allclose(merged.cov, full.cov, atol=1e-13)

    def test_rejects_bad_shapes(self):
        with pytest.raises(InputError):
            feature_stats([[1.0, 2.0]])
        with pytest.raises(InputError):
            feature_stats([1.0, 2.0, 3.0])


class TestFrechet:
    def test_identical(self):
        s = stats([1.0, -2.0], [[2.0, 0.3], [0.3, 1.0]])
        assert abs(frechet_distance(s, s)) < 1e-9

    def test_one_dimensional(self):
        assert abs(frechet_distance(stats([0.0], [[1.0]]), stats([3.0], [[1.0]])) - 9.0) < 1e-9

    def test_diagonal(self):
        a = stats([1.0, 1.0], np.diag([1.0, 4.0]))
        b = stats([0.0, 0.0], np.eye(2))
        assert abs(frechet_distance(a, b) - 3.0) < 1e-9

    def test_singular_covariance_is_fine(self):
        a = stats([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])
        b = stats([0.0, 0.0], [[0.0, 0.0], [0.0, 1.0]])
        assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_non_psd_rejected(self):
        with pytest.raises(NumericError):
            sqrt_psd(np.array([[1.0, 0.0], [0.0, -1.0]]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31))
    def test_symmetric_and_non_negative(self, dim, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(dim, dim)), rng.normal(size=(dim, dim))
        a = stats(rng.normal(size=dim), A @ A.T)
        b = stats(rng.normal(size=dim), B @ B.T)
        d_ab, d_ba = frechet_distance(a, b), frechet_distance(b, a)
        scale = 1.0 + np.trace(a.cov) + np.trace(b.cov)
        assert abs(d_ab - d_ba) < 1e-9 * scale
        assert d_ab > -1e-9 * scale

    def test_matches_commuting_closed_form(self):
        # diagonal covariances commute: tr sqrt(Sa Sb) = sum sqrt(a_i b_i)
        da, db = np.array([1.0, 2.0, 5.0]), np.array([3.0, 0.5, 2.0])
        mu = np.array([0.5, -1.0, 2.0])
        expected = mu @ mu + da.sum() + db.sum() - 2 * np.sqrt(da * db).sum()
        got = frechet_distance(stats(mu, np.diag(da)), stats(np.zeros(3), np.diag(db)))
        assert abs(got - expected) < 1e-12


class TestClipScore:
    def test_cases(self):
        v = np.array([1.0, 2.0, -3.0])
        assert clip_style_score(v, v) == pytest.approx(1.0, abs=1e-15)
        assert clip_style_score([1.0, 0.0], [0.0, 2.0]) == 0.0
        assert clip_style_score(v, -v) == pytest.approx(-1.0, abs=1e-15)

    def test_invalid(self):
        with pytest.raises(InputError):
            clip_style_score([0.0, 0.0], [1.0, 0.0])
        with pytest.raises(InputError):
            clip_style_score([1.0], [1.0, 0.0])


@pytest.fixture(scope="module")
def pipeline(cfg, backbone):
    return Pipeline.build(cfg.replace(sample_steps=3), backbone=backbone)


def test_evaluate_sets_record(pipeline):
    g = torch.Generator().manual_seed(0)
    # 20 samples > 16 feature dims keeps the covariances full rank
    imgs = [torch.rand(3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1 for _ in range(40)]
    caps = ["a red circle on a blue background"] * 40
    gen, ref = list(zip(imgs[:20], caps)), list(zip(imgs[20:], caps))
    rec = evaluate_sets(pipeline, gen, ref)
    assert set(rec) == {"fid_stub", "clip_stub_mean", "n"} and rec["n"] == 20
    assert rec["fid_stub"] > 0
    assert abs(evaluate_sets(pipeline, gen, gen)["fid_stub"]) < 1e-9
    assert -1.0 <= rec["clip_stub_mean"] <= 1.0


class TestSweep:
    def test_offset_zero_reproduces_t2i(self, pipeline):
        report = layer_sweep("a green square", [0], pipeline)
        (img,) = [e for e in interleave_generate([Round("a green square")], "text_to_image", pipeline) if e.kind == "image"]
        assert torch.equal(report.entries[0].latent, img.payload.values)

    def test_desk_offsets_accepted(self, pipeline):
        report = layer_sweep("a cat", [0, 1, 2, 4], pipeline)
        assert [e.layer for e in report.entries] == [6, 5, 4, 2]
        lines = report.table().splitlines()
        assert lines[0] == "offset\tlayer\tl_align" and len(lines) == 5

    @pytest.mark.parametrize("offsets", [[7], [-1], [1, 1]])
    def test_invalid_offsets(self, pipeline, offsets):
        with pytest.raises(InputError):
            layer_sweep("a cat", offsets, pipeline)
