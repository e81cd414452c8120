import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msgsagan.errors import ConfigurationError, ExtractorUnavailable
from msgsagan.metrics import (CANONICAL_WEIGHTS, IdentityExtractor, InceptionExtractor, MetricReport,
                              MSSSIMConfig, detect_mode_collapse, evaluate_images, extract_features, fid,
                              get_extractor, ms_ssim_batch, ms_ssim_dataset, ms_ssim_pair, sample_pairs,
                              trace_sqrt_product)


def brute_force_fid(real, gen):
    """Independent route: eigenvalues of the non-symmetric product sigma_r @ sigma_s."""
    mu_r, mu_s = real.mean(0), gen.mean(0)
    n_r, n_s = len(real), len(gen)
    sr = (real - mu_r).T @ (real - mu_r) / (n_r - 1)
    ss = (gen - mu_s).T @ (gen - mu_s) / (n_s - 1)
    eig = np.linalg.eigvals(sr @ ss)
    tr_sqrt = np.sqrt(np.clip(eig.real, 0, None)).sum()
    return float(np.sum((mu_r - mu_s) ** 2) + np.trace(sr) + np.trace(ss) - 2 * tr_sqrt)


def sqrtm_fid(real, gen):
    mu_r, mu_s = real.mean(0), gen.mean(0)
    sr, ss = np.atleast_2d(np.cov(real, rowvar=False)), np.atleast_2d(np.cov(gen, rowvar=False))
    covmean = scipy.linalg.sqrtm(sr @ ss)
    return float(np.sum((mu_r - mu_s) ** 2) + np.trace(sr + ss - 2 * covmean.real))


class TestFID:
    def test_self_distance_is_zero(self):
        x = np.random.default_rng(0).normal(size=(200, 16))
        assert fid(x, x) <= 1e-6

    def test_mean_shift(self):
        rng = np.random.default_rng(1)
        mu = np.full(4, 1.5)  # |mu|^2 = 9
        r = rng.normal(size=(100_000, 4))
        s = rng.normal(size=(100_000, 4)) + mu
        assert fid(r, s) == pytest.approx(9.0, rel=0.05)

    def test_covariance_scaling(self):
        rng = np.random.default_rng(2)
        d = 4
        r = rng.normal(size=(100_000, d))
        s = 2.0 * rng.normal(size=(100_000, d))
        assert fid(r, s) == pytest.approx(float(d), rel=0.05)

    @settings(max_examples=60, deadline=None)
    @given(d=st.integers(1, 3), n_r=st.integers(5, 10), n_s=st.integers(5, 10), seed=st.integers(0, 2**31))
    def test_matches_brute_force_oracles(self, d, n_r, n_s, seed):
        rng = np.random.default_rng(seed)
        real = rng.normal(size=(n_r, d)) @ rng.normal(size=(d, d))
        gen = rng.normal(size=(n_s, d)) * rng.uniform(0.5, 2, size=d) + rng.normal(size=d)
        expected = brute_force_fid(real, gen)
        assert fid(real, gen) == pytest.approx(max(expected, 0.0), abs=1e-8, rel=1e-8)
        assert fid(real, gen) == pytest.approx(max(sqrtm_fid(real, gen), 0.0), abs=1e-8, rel=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(30, 5)), rng.normal(size=(40, 5)) * 1.5 + 0.3
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)
        assert fid(a, b) >= 0

    def test_trace_sqrt_of_diagonal(self):
        assert trace_sqrt_product(np.diag([1.0, 4.0]), np.diag([9.0, 1.0])) == pytest.approx(3.0 + 2.0)

    def test_duplicated_list(self):
        images = torch.rand(20, 1, 2, 2, dtype=torch.float64)
        feats = extract_features(images, IdentityExtractor())
        dup = extract_features(torch.cat([images, images]), IdentityExtractor())
        assert dup.shape == (40, 4)
        np.testing.assert_array_equal(dup[:20], dup[20:])
        assert fid(dup, dup) == 0.0
        # same mean; the unbiased covariance shrinks by r = 2(n-1)/(2n-1), so
        # FID = tr(sigma) (1 - sqrt(r))^2, which vanishes as n grows
        r = 2 * 19 / 39
        expected = np.trace(np.cov(feats, rowvar=False)) * (1 - np.sqrt(r)) ** 2
        assert fid(dup, feats) == pytest.approx(expected, rel=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            fid(np.zeros((5, 3)), np.zeros((5, 4)))

    def test_non_finite_rejected(self):
        x = np.ones((5, 2))
        x[0, 0] = np.nan
        with pytest.raises(ConfigurationError):
            fid(x, np.ones((5, 2)))

    def test_too_few_rows(self):
        with pytest.raises(ConfigurationError):
            fid(np.zeros((1, 2)), np.zeros((5, 2)))


class TestExtractors:
    def test_identity_is_raw_pixels(self):
        images = torch.arange(8, dtype=torch.float64).view(2, 1, 2, 2) / 8
        np.testing.assert_array_equal(extract_features(images, IdentityExtractor()), images.flatten(1).numpy())

    def test_identity_pooling(self):
        images = torch.rand(3, 1, 8, 8)
        assert extract_features(images, IdentityExtractor(pool_to=4)).shape == (3, 16)

    def test_unknown_extractor(self):
        with pytest.raises(ConfigurationError):
            get_extractor("vgg")

    def test_missing_weights_is_environment_error(self, monkeypatch):
        import torchvision.models

        def unavailable(*a, **kw):
            raise RuntimeError("no network")

        monkeypatch.setattr(torchvision.models, "inception_v3", unavailable)
        with pytest.raises(ExtractorUnavailable) as info:
            InceptionExtractor()
        assert info.value.kind == "environment"
        assert "--extractor identity" in str(info.value)


def _blurred_noise(seed, n=1, size=64):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 1, size, size, generator=g, dtype=torch.float64)
    return torch.nn.functional.avg_pool2d(x, 3, stride=1, padding=1)


class TestMSSSIM:
    def test_scale_count_follows_resolution(self):
        assert MSSSIMConfig.for_resolution(64).num_scales == 3
        assert MSSSIMConfig.for_resolution(16).num_scales == 1
        assert MSSSIMConfig.for_resolution(256).num_scales == 5
        w = MSSSIMConfig(num_scales=3).weights
        assert sum(w) == pytest.approx(1.0)
        assert w[2] == pytest.approx(CANONICAL_WEIGHTS[2] / sum(CANONICAL_WEIGHTS[:3]))

    def test_self_similarity_is_one(self):
        a = _blurred_noise(0)[0, 0]
        assert ms_ssim_pair(a, a) == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(s1=st.integers(0, 10_000), s2=st.integers(0, 10_000))
    def test_symmetric_and_bounded(self, s1, s2):
        a, b = _blurred_noise(s1)[0, 0], _blurred_noise(s2 + 10_001)[0, 0]
        ab, ba = ms_ssim_pair(a, b), ms_ssim_pair(b, a)
        assert ab == ba
        assert 0.0 <= ab < 1.0

    def test_constant_images_luminance_closed_form(self):
        # constant images: sigma = 0 so contrast-structure is 1 at every scale and only
        # the coarsest-scale luminance term survives, raised to its renormalised weight
        c1 = (0.01 * 1.0) ** 2
        lum = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
        assert lum == pytest.approx(0.6000639897616381, abs=1e-15)
        expected = lum ** (0.3001 / (0.0448 + 0.2856 + 0.3001))
        a, b = np.full((64, 64), 0.25), np.full((64, 64), 0.75)
        assert ms_ssim_pair(a, b) == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(0.784202772241651, abs=1e-9)

    def test_inverted_structure_floors_at_zero(self):
        a = _blurred_noise(1)[0, 0]
        assert ms_ssim_pair(a, 1 - a) == 0.0

    def test_refuses_too_many_scales(self):
        a = np.zeros((64, 64))
        with pytest.raises(ConfigurationError):
            ms_ssim_pair(a, a, MSSSIMConfig(num_scales=4))
        with pytest.raises(ConfigurationError):
            MSSSIMConfig.for_resolution(8)

    def test_batch_shape_checks(self):
        with pytest.raises(ConfigurationError):
            ms_ssim_batch(torch.zeros(2, 1, 64, 64), torch.zeros(3, 1, 64, 64))
        with pytest.raises(ConfigurationError):
            ms_ssim_batch(torch.zeros(2, 3, 64, 64), torch.zeros(2, 3, 64, 64))

    def test_dataset_deterministic_under_seed(self):
        images = _blurred_noise(5, n=24)
        assert ms_ssim_dataset(images, seed=3) == ms_ssim_dataset(images, seed=3)
        assert ms_ssim_dataset(images, n_pairs=40, seed=3) == ms_ssim_dataset(images, n_pairs=40, seed=3, chunk=7)

    def test_identical_dataset_scores_one(self):
        images = _blurred_noise(6).repeat(10, 1, 1, 1)
        assert ms_ssim_dataset(images) == pytest.approx(1.0, abs=1e-6)


class TestPairs:
    def test_default_is_disjoint_half(self):
        pairs = sample_pairs(3616, None, 0)
        assert pairs.shape == (1808, 2)
        assert len(np.unique(pairs)) == 3616

    def test_extra_pairs_distinct_members(self):
        pairs = sample_pairs(5, 50, 1)
        assert pairs.shape == (50, 2)
        assert (pairs[:, 0] != pairs[:, 1]).all()

    def test_needs_two_images(self):
        with pytest.raises(ConfigurationError):
            sample_pairs(1, None, 0)


class TestModeCollapse:
    @pytest.mark.parametrize("real,gen,expected", [(0.50, 0.74, True), (0.50, 0.47, False), (0.50, 0.50, False)])
    def test_rule(self, real, gen, expected):
        assert detect_mode_collapse(real, gen) is expected


class TestEvaluateImages:
    def test_real_against_itself(self):
        images = _blurred_noise(8, n=20, size=16).float()
        report = evaluate_images(images, images, IdentityExtractor(pool_to=4), seed=0)
        assert report.fid <= 1e-6
        assert report.ms_ssim_real == report.ms_ssim_gen
        assert report.mode_collapse is False
        assert MetricReport.from_dict(report.to_dict()) == report
