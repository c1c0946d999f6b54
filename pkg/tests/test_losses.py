"""Objective and gradient tests.

Every analytic gradient is validated against central finite differences on
small random instances; the hand values pin the loss conventions (means over
bins, clamped scale-invariant ratio, hybrid mixing).
"""

import numpy as np
import pytest

from maskuq.losses import (
    SDR_CLAMP_DB,
    amap_enhance_path,
    amap_synthesis,
    amap_synthesis_backward,
    hybrid,
    masked_si_sdr_loss,
    mse,
    nll_posterior,
    si_sdr_loss,
    wiener_synthesis,
    wiener_synthesis_backward,
)
from maskuq.spectral import ComplexSpectrogram, StftConfig, Waveform, istft, stft
from maskuq.statmodel import PosteriorField

TINY_CFG = StftConfig(frame_len=4, hop=2, sample_rate=16000)
WAVE_CFG = StftConfig(frame_len=16, hop=8, sample_rate=16000)


def _spec(coeffs, cfg=TINY_CFG, original_len=4):
    return ComplexSpectrogram(np.asarray(coeffs, complex), cfg, original_len)


def _const_pair(s, x, shape=(1, 3)):
    """Reference/noisy pair where every bin repeats the same hand values."""
    ref = _spec(np.full(shape, s, dtype=complex))
    noisy = _spec(np.full(shape, x, dtype=complex))
    return ref, noisy


def _fd_grad(fn, arr, eps=1e-6):
    """Central finite differences of a scalar function w.r.t. arr in place."""
    grad = np.zeros_like(arr)
    flat, gf = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return grad


def _max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _wave_instance(seed=0, n=56):
    rng = np.random.default_rng(seed)
    clean = Waveform(0.1 * rng.standard_normal(n))
    mix = Waveform(clean.samples + 0.05 * rng.standard_normal(n))
    noisy = stft(mix, WAVE_CFG)
    ref = stft(clean, WAVE_CFG)
    shape = noisy.coeffs.shape
    wf = 1.0 / (1.0 + np.exp(-rng.standard_normal(shape)))
    loglam = rng.uniform(-4.0, 0.0, size=shape)
    return clean, ref, noisy, wf, loglam


class TestMse:
    def test_hand_value(self):
        """S=1, X=2, W=0.25 in every bin: |1 - 0.5|^2 = 0.25."""
        ref, noisy = _const_pair(1.0, 2.0)
        rep = mse(ref, noisy, np.full((1, 3), 0.25))
        assert rep.value == 0.25

    def test_perfect_mask_is_zero(self):
        ref, noisy = _const_pair(1.0, 2.0)
        rep = mse(ref, noisy, np.full((1, 3), 0.5))
        assert rep.value == 0.0

    def test_zero_mask_leaves_reference_energy(self):
        ref, noisy = _const_pair(1.0, 2.0)
        assert mse(ref, noisy, np.zeros((1, 3))).value == 1.0

    def test_gradient_matches_finite_differences(self):
        _, ref, noisy, wf, _ = _wave_instance(seed=1)
        rep = mse(ref, noisy, wf)
        fd = _fd_grad(lambda: mse(ref, noisy, wf).value, wf)
        assert _max_rel_err(rep.grad_wf, fd) < 1e-4
        assert np.all(rep.grad_loglam == 0.0)

    def test_shape_mismatch_rejected(self):
        ref, noisy = _const_pair(1.0, 2.0)
        with pytest.raises(ValueError):
            mse(ref, noisy, np.zeros((2, 3)))


class TestNll:
    def test_hand_value(self):
        """S=1, X=2, W=0.25, lam=0.5: log 0.5 + 0.25/0.5 = -0.193147."""
        ref, noisy = _const_pair(1.0, 2.0)
        fld = PosteriorField(np.full((1, 3), 0.25), np.full((1, 3), 0.5))
        rep = nll_posterior(ref, noisy, fld)
        np.testing.assert_allclose(rep.value, np.log(0.5) + 0.5, atol=1e-12)
        np.testing.assert_allclose(rep.value, -0.193147, atol=1e-6)

    def test_unit_variance_equals_mse(self):
        """lam=1 zeroes the log term and the 1/lam weight: value == mse."""
        _, ref, noisy, wf, _ = _wave_instance(seed=2)
        fld = PosteriorField(wf, np.ones_like(wf))
        rep_nll = nll_posterior(ref, noisy, fld)
        rep_mse = mse(ref, noisy, wf)
        assert rep_nll.value == rep_mse.value
        assert np.array_equal(rep_nll.grad_wf, rep_mse.grad_wf)

    def test_gradients_match_finite_differences(self):
        _, ref, noisy, wf, loglam = _wave_instance(seed=3)
        fld = PosteriorField(wf, np.exp(loglam))
        rep = nll_posterior(ref, noisy, fld)
        fd_wf = _fd_grad(
            lambda: nll_posterior(ref, noisy,
                                  PosteriorField(wf, np.exp(loglam))).value,
            wf)
        fd_ll = _fd_grad(
            lambda: nll_posterior(ref, noisy,
                                  PosteriorField(wf, np.exp(loglam))).value,
            loglam)
        assert _max_rel_err(rep.grad_wf, fd_wf) < 1e-4
        assert _max_rel_err(rep.grad_loglam, fd_ll) < 1e-4


class TestSiSdrLoss:
    def test_perfect_estimate_clamps(self):
        rng = np.random.default_rng(4)
        s = Waveform(rng.standard_normal(200))
        rep = si_sdr_loss(s, s.samples.copy())
        assert rep.value == -SDR_CLAMP_DB
        assert np.all(rep.grad_est == 0.0)

    def test_scaled_estimate_also_clamps(self):
        """Any rescaling of a perfect estimate is still perfect."""
        rng = np.random.default_rng(5)
        s = Waveform(rng.standard_normal(200))
        rep = si_sdr_loss(s, 3.7 * s.samples)
        assert rep.value == -SDR_CLAMP_DB

    def test_orthogonal_error_hand_value(self):
        """est = s + e with e orthogonal, ||e||^2 = ||s||^2/10: loss -10."""
        rng = np.random.default_rng(6)
        s = rng.standard_normal(400)
        t = rng.standard_normal(400)
        e = t - (np.dot(t, s) / np.dot(s, s)) * s
        e *= np.sqrt(np.dot(s, s) / (10.0 * np.dot(e, e)))
        rep = si_sdr_loss(Waveform(s), s + e)
        np.testing.assert_allclose(rep.value, -10.0, atol=1e-9)

    def test_orthogonal_estimate_clamps_at_bottom(self):
        rng = np.random.default_rng(7)
        s = rng.standard_normal(400)
        t = rng.standard_normal(400)
        e = t - (np.dot(t, s) / np.dot(s, s)) * s
        rep = si_sdr_loss(Waveform(s), e)
        assert rep.value == SDR_CLAMP_DB
        assert np.all(rep.grad_est == 0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(8)
        s = Waveform(rng.standard_normal(300))
        est = rng.standard_normal(300)
        base = si_sdr_loss(s, est).value
        for c in (0.1, 7.0):
            assert abs(si_sdr_loss(s, c * est).value - base) < 1e-9

    def test_silent_reference_rejected(self):
        with pytest.raises(ValueError):
            si_sdr_loss(Waveform(np.zeros(10) + 0.0 * np.arange(10) + 1e-300),
                        np.ones(10))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        s = Waveform(rng.standard_normal(64))
        est = rng.standard_normal(64)
        rep = si_sdr_loss(s, est)
        fd = _fd_grad(lambda: si_sdr_loss(s, est).value, est)
        assert _max_rel_err(rep.grad_est, fd) < 1e-4


class TestMaskedSynthesis:
    def test_unit_mask_reconstructs_the_mixture(self):
        _, _, noisy, _, _ = _wave_instance(seed=10)
        wave, _ = wiener_synthesis(noisy, np.ones(noisy.coeffs.shape))
        ref = istft(noisy)
        np.testing.assert_allclose(wave.samples, ref.samples, atol=1e-12)

    def test_zero_mask_is_silent(self):
        _, _, noisy, _, _ = _wave_instance(seed=11)
        wave, _ = wiener_synthesis(noisy, np.zeros(noisy.coeffs.shape))
        assert np.all(wave.samples == 0.0)

    def test_backward_matches_finite_differences(self):
        """d <g, istft(wf X)> / d wf via the adjoint equals direct FD."""
        rng = np.random.default_rng(12)
        _, _, noisy, wf, _ = _wave_instance(seed=12)
        g = rng.standard_normal(noisy.original_len)

        def fn():
            wave, _ = wiener_synthesis(noisy, wf)
            return float(np.dot(g, wave.samples))

        _, cache = wiener_synthesis(noisy, wf)
        analytic = wiener_synthesis_backward(g, cache)
        fd = _fd_grad(fn, wf)
        assert _max_rel_err(analytic, fd) < 1e-4

    def test_masked_si_sdr_gradient(self):
        clean, _, noisy, wf, _ = _wave_instance(seed=13)
        rep = masked_si_sdr_loss(clean, noisy, wf)
        fd = _fd_grad(lambda: masked_si_sdr_loss(clean, noisy, wf).value, wf)
        assert _max_rel_err(rep.grad_wf, fd) < 1e-4
        assert np.all(rep.grad_loglam == 0.0)


class TestAmapPath:
    def test_zero_variance_reduces_to_the_plain_mask(self):
        """lam=0 collapses the magnitude estimate to wf |X|."""
        _, _, noisy, wf, _ = _wave_instance(seed=14)
        fld = PosteriorField(wf, np.zeros_like(wf))
        wave, _ = amap_synthesis(noisy, fld)
        plain, _ = wiener_synthesis(noisy, wf)
        np.testing.assert_allclose(wave.samples, plain.samples, atol=1e-10)

    def test_unit_mask_zero_variance_reconstructs(self):
        _, _, noisy, _, _ = _wave_instance(seed=15)
        ones = np.ones(noisy.coeffs.shape)
        fld = PosteriorField(ones, np.zeros_like(ones))
        wave = amap_enhance_path(noisy, fld)
        np.testing.assert_allclose(wave.samples, istft(noisy).samples,
                                   atol=1e-10)

    def test_config_mismatch_rejected(self):
        _, _, noisy, wf, _ = _wave_instance(seed=16)
        fld = PosteriorField(wf, np.zeros_like(wf))
        with pytest.raises(ValueError):
            amap_enhance_path(noisy, fld, cfg=TINY_CFG)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        _, _, noisy, wf, loglam = _wave_instance(seed=17)
        g = rng.standard_normal(noisy.original_len)

        def fn():
            wave, _ = amap_synthesis(noisy,
                                     PosteriorField(wf, np.exp(loglam)))
            return float(np.dot(g, wave.samples))

        _, cache = amap_synthesis(noisy, PosteriorField(wf, np.exp(loglam)))
        g_wf, g_ll = amap_synthesis_backward(g, cache)
        assert _max_rel_err(g_wf, _fd_grad(fn, wf)) < 1e-4
        assert _max_rel_err(g_ll, _fd_grad(fn, loglam)) < 1e-4


class TestHybrid:
    def _instance(self, seed):
        clean, ref, noisy, wf, loglam = _wave_instance(seed=seed)
        return clean, ref, noisy, wf, loglam

    def test_endpoints_match_the_parts(self):
        clean, ref, noisy, wf, loglam = self._instance(18)
        fld = PosteriorField(wf, np.exp(loglam))
        at_one = hybrid(ref, noisy, fld, clean, beta=1.0)
        pure_nll = nll_posterior(ref, noisy, fld)
        assert at_one.value == pure_nll.value
        np.testing.assert_array_equal(at_one.grad_wf, pure_nll.grad_wf)
        at_zero = hybrid(ref, noisy, fld, clean, beta=0.0)
        est, _ = amap_synthesis(noisy, fld)
        assert at_zero.value == si_sdr_loss(clean, est).value

    def test_affine_in_beta(self):
        """value(0.5) is the midpoint of value(0.2) and value(0.8)."""
        clean, ref, noisy, wf, loglam = self._instance(19)
        fld = PosteriorField(wf, np.exp(loglam))
        v = {b: hybrid(ref, noisy, fld, clean, beta=b).value
             for b in (0.2, 0.5, 0.8)}
        np.testing.assert_allclose(v[0.5], 0.5 * (v[0.2] + v[0.8]),
                                   atol=1e-12)

    def test_parts_recorded(self):
        clean, ref, noisy, wf, loglam = self._instance(20)
        fld = PosteriorField(wf, np.exp(loglam))
        rep = hybrid(ref, noisy, fld, clean, beta=0.001)
        assert set(rep.parts) == {"nll", "sisdr"}
        expected = 0.001 * rep.parts["nll"] + 0.999 * rep.parts["sisdr"]
        np.testing.assert_allclose(rep.value, expected, atol=1e-12)

    def test_invalid_beta_rejected(self):
        clean, ref, noisy, wf, loglam = self._instance(21)
        fld = PosteriorField(wf, np.exp(loglam))
        with pytest.raises(ValueError):
            hybrid(ref, noisy, fld, clean, beta=1.5)

    def test_gradients_match_finite_differences(self):
        clean, ref, noisy, wf, loglam = self._instance(22)

        def fn():
            fld = PosteriorField(wf, np.exp(loglam))
            return hybrid(ref, noisy, fld, clean, beta=0.3).value

        rep = hybrid(ref, noisy, PosteriorField(wf, np.exp(loglam)), clean,
                     beta=0.3)
        assert _max_rel_err(rep.grad_wf, _fd_grad(fn, wf)) < 1e-4
        assert _max_rel_err(rep.grad_loglam, _fd_grad(fn, loglam)) < 1e-4
