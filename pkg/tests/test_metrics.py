import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from peftts.data import make_corpus
from peftts.metrics import (
    RankWarning,
    cfsd_proxy,
    frechet_gaussian,
    gaussian_stats,
    mse_duration,
    mse_pitch,
    secs_proxy,
    utterance_signature,
)


def _psd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def _frechet_reference(mu1, s1, mu2, s2):
    """Independent path: scipy's Schur-based sqrtm of the (non-symmetric) product."""
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    return float((mu1 - mu2) @ (mu1 - mu2) + np.trace(s1 + s2 - 2 * np.real(covmean)))


class TestMSE:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=7)
        assert mse_pitch(x, x) == 0.0 and mse_duration(x, x) == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(1).normal(size=9)
        assert mse_pitch(x + 0.5, x) == pytest.approx(0.25, abs=1e-15)

    def test_hand_example(self):
        # errors 0.5, -1, 2 -> (0.25 + 1 + 4) / 3
        assert mse_pitch([1.5, 0.0, 3.0], [1.0, 1.0, 1.0]) == pytest.approx(1.75, abs=1e-15)
        assert mse_duration(np.log([2, 3, 1]), np.log([2, 3, 1])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_pitch([1, 2], [1, 2, 3])


class TestSecs:
    def _pairs(self, rng, n=4):
        return [(rng.normal(size=(int(rng.integers(3, 9)), 5)), rng.normal(size=4) + 2) for _ in range(n)]

    def test_identical_sets(self):
        pairs = self._pairs(np.random.default_rng(0))
        assert secs_proxy(pairs, pairs) == pytest.approx(1.0, abs=1e-12)

    def test_negated_signatures(self):
        sig = np.stack([utterance_signature(m, p) for m, p in self._pairs(np.random.default_rng(1))])
        assert secs_proxy(sig, -sig) == pytest.approx(-1.0, abs=1e-12)

    def test_signature_layout(self):
        mel = np.array([[1.0, 2.0], [3.0, 6.0]])
        sig = utterance_signature(mel, [100.0, 110.0])
        np.testing.assert_allclose(sig, [2.0, 4.0, 1.0, 2.0, 105.0, 5.0])

    def test_speakers_separate(self):
        c = make_corpus(2, 20, 3)
        pairs = lambda s: [(u.mel, c.norm_pitch(u.pitch)) for u in c.select(speaker=s)]
        a, b = pairs(0), pairs(1)
        same = secs_proxy(a[:10], a[10:])
        cross = secs_proxy(a[:10], b[:10])
        assert cross < same

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        s = secs_proxy(rng.normal(size=(3, 6)), rng.normal(size=(4, 6)))
        assert -1.0 <= s <= 1.0


class TestFrechet:
    def test_identical(self):
        rng = np.random.default_rng(0)
        mu, s = rng.normal(size=5), _psd(rng, 5)
        assert frechet_gaussian(mu, s, mu, s) == pytest.approx(0.0, abs=1e-8)

    def test_one_dimensional_closed_form(self):
        assert frechet_gaussian([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-9)
        assert frechet_gaussian(0.0, 4.0, 1.0, 1.0) == pytest.approx(1.0 + (2.0 - 1.0) ** 2, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric_and_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        mu1, mu2 = rng.normal(size=4), rng.normal(size=4)
        s1, s2 = _psd(rng, 4), _psd(rng, 4)
        d12 = frechet_gaussian(mu1, s1, mu2, s2)
        assert d12 == pytest.approx(frechet_gaussian(mu2, s2, mu1, s1), abs=1e-8)
        assert d12 == pytest.approx(_frechet_reference(mu1, s1, mu2, s2), abs=1e-8)

    def test_commuting_covariances(self):
        # diagonal covariances: sum of squared differences of standard deviations
        a, b = np.array([1.0, 4.0, 9.0]), np.array([4.0, 1.0, 9.0])
        assert frechet_gaussian(np.zeros(3), np.diag(a), np.zeros(3), np.diag(b)) == pytest.approx(2.0, abs=1e-12)

    def test_tolerates_asymmetric_and_indefinite_input(self):
        rng = np.random.default_rng(3)
        s = _psd(rng, 3)
        noisy = s + 1e-12 * rng.normal(size=(3, 3))
        assert frechet_gaussian(np.zeros(3), noisy, np.zeros(3), s) == pytest.approx(0.0, abs=1e-8)
        singular = np.diag([1.0, 0.0, -1e-14])
        assert frechet_gaussian(np.zeros(3), singular, np.zeros(3), singular) >= 0.0


class TestCfsd:
    def test_zero_and_symmetry(self):
        rng = np.random.default_rng(0)
        g = {0: rng.normal(size=(50, 4)), 1: rng.normal(size=(60, 4)) + 1}
        r = {0: rng.normal(size=(40, 4)) * 2, 1: rng.normal(size=(45, 4))}
        assert cfsd_proxy(g, g) == pytest.approx(0.0, abs=1e-8)
        assert cfsd_proxy(g, r) == pytest.approx(cfsd_proxy(r, g), abs=1e-8)

    def test_average_of_speakers(self):
        rng = np.random.default_rng(1)
        g = {k: rng.normal(size=(30, 3)) for k in "ab"}
        r = {k: rng.normal(size=(30, 3)) + 1 for k in "ab"}
        per = [frechet_gaussian(*gaussian_stats(g[k]), *gaussian_stats(r[k])) for k in "ab"]
        assert cfsd_proxy(g, r) == pytest.approx(np.mean(per), rel=1e-12)

    def test_rank_fallback(self):
        rng = np.random.default_rng(2)
        g, r = {0: rng.normal(size=(3, 5))}, {0: rng.normal(size=(20, 5))}
        with pytest.warns(RankWarning):
            val = cfsd_proxy(g, r)
        expected = frechet_gaussian(*gaussian_stats(g[0], True), *gaussian_stats(r[0], True))
        assert val == pytest.approx(expected)

    def test_no_warning_with_enough_frames(self):
        rng = np.random.default_rng(3)
        with warnings.catch_warnings():
            warnings.simplefilter("error", RankWarning)
            cfsd_proxy({0: rng.normal(size=(6, 5))}, {0: rng.normal(size=(6, 5))})

    def test_speaker_sets_must_match(self):
        with pytest.raises(ValueError):
            cfsd_proxy({0: np.zeros((5, 2))}, {1: np.zeros((5, 2))})
