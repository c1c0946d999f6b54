"""Network forward/backward and training-loop tests.

The backward pass is validated against finite differences over every
parameter; training behavior (reproducibility, early stopping, best-weight
restore, divergence detection, checkpointing) is exercised on tiny corpora
so the whole module stays fast.
"""

import warnings

import numpy as np
import pytest

from maskuq.data import mix_at_snr, synth_noise, synth_speech
from maskuq.net import (
    MODE_EVAL,
    MODE_EVAL_MC,
    MODE_TRAIN,
    DropoutSpec,
    FeatureSpec,
    MaskNet,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    make_features,
    predict_field,
    save_checkpoint,
    train,
    validation_loss,
)
from maskuq.spectral import StftConfig, Waveform, stft

CFG = StftConfig(frame_len=64, hop=32, sample_rate=16000)


def _utterance(speech_seed=5, noise_seed=6, snr_db=15.0, duration=0.5):
    clean = synth_speech(speech_seed, duration)
    noise = synth_noise("white", noise_seed, duration)
    mix, _ = mix_at_snr(clean, noise, snr_db)
    return clean, mix


def _tiny_net(seed=0, hidden=32, context=1, dropout=DropoutSpec(0.0, ())):
    feature = FeatureSpec(context=context)
    dims = [feature.feature_dim(CFG.n_bins), hidden, 2 * CFG.n_bins]
    return MaskNet.initialize(dims, dropout, feature, seed=seed)


class TestFeatures:
    def test_feature_dim(self):
        assert FeatureSpec(context=3).feature_dim(257) == 1799
        assert FeatureSpec(context=0).feature_dim(257) == 257
        with pytest.raises(ValueError):
            FeatureSpec(context=-1)

    def test_shape_and_normalization(self):
        clean, mix = _utterance()
        spec = stft(mix, CFG)
        fspec = FeatureSpec(context=2)
        feats = make_features(spec, fspec)
        assert feats.shape == (spec.n_frames, 5 * CFG.n_bins)
        # with context 0 the features are exactly the normalized log mags
        flat = make_features(spec, FeatureSpec(context=0))
        np.testing.assert_allclose(flat.mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(flat.std(), 1.0, atol=1e-12)

    def test_context_layout_and_edge_replication(self):
        clean, mix = _utterance()
        spec = stft(mix, CFG)
        base = make_features(spec, FeatureSpec(context=0))
        feats = make_features(spec, FeatureSpec(context=1))
        f = CFG.n_bins
        # middle block is the frame itself, neighbours on either side
        np.testing.assert_array_equal(feats[5, f:2 * f], base[5])
        np.testing.assert_array_equal(feats[5, :f], base[4])
        np.testing.assert_array_equal(feats[5, 2 * f:], base[6])
        # first frame replicates itself to the left
        np.testing.assert_array_equal(feats[0, :f], base[0])


class TestForward:
    def test_zero_weights_give_neutral_field(self):
        """All-zero parameters: sigmoid(0) = 0.5 gain, exp(0) = 1 variance."""
        feature = FeatureSpec(context=0)
        dims = [CFG.n_bins, 8, 2 * CFG.n_bins]
        net = MaskNet(
            dims,
            [np.zeros((dims[0], dims[1])), np.zeros((dims[1], dims[2]))],
            [np.zeros(dims[1]), np.zeros(dims[2])],
            DropoutSpec(0.0, ()), feature, seed=0)
        _, mix = _utterance()
        fld = predict_field(net, stft(mix, CFG))
        assert np.all(fld.wf == 0.5)
        assert np.all(fld.lam == 1.0)

    def test_eval_mode_is_deterministic(self):
        net = _tiny_net(dropout=DropoutSpec(0.5, (0,)))
        _, mix = _utterance()
        spec = stft(mix, CFG)
        a = predict_field(net, spec, MODE_EVAL)
        b = predict_field(net, spec, MODE_EVAL)
        assert np.array_equal(a.wf, b.wf)
        assert np.array_equal(a.lam, b.lam)

    def test_output_ranges(self):
        net = _tiny_net(seed=3)
        _, mix = _utterance()
        fld = predict_field(net, stft(mix, CFG))
        assert np.all((fld.wf > 0.0) & (fld.wf < 1.0))
        assert np.all(fld.lam >= np.exp(-12.0))
        assert np.all(fld.lam <= np.exp(6.0))

    def test_log_variance_clamp_engages(self):
        rng = np.random.default_rng(4)
        net = _tiny_net(seed=4, context=0)
        huge = 1e4 * rng.standard_normal((10, CFG.n_bins))
        fld = net.forward(huge)
        assert np.max(fld.lam) == np.exp(6.0)
        assert np.min(fld.lam) == np.exp(-12.0)

    def test_bad_mode_and_shape_rejected(self):
        net = _tiny_net()
        with pytest.raises(ValueError, match="mode"):
            net.forward(np.zeros((2, net.layer_dims[0])), "predict")
        with pytest.raises(ValueError, match="features"):
            net.forward(np.zeros((2, 7)))

    def test_bin_mismatch_rejected(self):
        net = _tiny_net()
        other = StftConfig(frame_len=32, hop=16, sample_rate=16000)
        _, mix = _utterance()
        with pytest.raises(ValueError, match="bin"):
            predict_field(net, stft(mix, other))

    def test_non_finite_outputs_raise_divergence(self):
        net = _tiny_net(seed=5)
        net.weights[0][0, 0] = np.inf
        _, mix = _utterance()
        with pytest.raises(TrainingDiverged):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                predict_field(net, stft(mix, CFG))


class TestDropout:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DropoutSpec(1.0, (0,))
        with pytest.raises(ValueError):
            DropoutSpec(0.5, (-1,))
        assert DropoutSpec.deepest(3, 0.5).layers == (2,)
        with pytest.raises(ValueError):
            DropoutSpec.deepest(0)

    def test_dropout_layer_out_of_range_rejected(self):
        feature = FeatureSpec(context=0)
        dims = [CFG.n_bins, 8, 2 * CFG.n_bins]
        with pytest.raises(ValueError, match="dropout"):
            MaskNet.initialize(dims, DropoutSpec(0.5, (1,)), feature, seed=0)

    def test_stochastic_modes_need_rng(self):
        net = _tiny_net(dropout=DropoutSpec(0.5, (0,)))
        x = np.zeros((2, net.layer_dims[0]))
        with pytest.raises(ValueError, match="rng"):
            net.forward(x, MODE_EVAL_MC)
        with pytest.raises(ValueError, match="rng"):
            net.forward(x, MODE_TRAIN)

    def test_drop_fraction_and_inverse_scaling(self):
        """Half the units drop (within 2%) and survivors are doubled."""
        feature = FeatureSpec(context=0)
        dims = [CFG.n_bins, 100, 2 * CFG.n_bins]
        net = MaskNet.initialize(dims, DropoutSpec(0.5, (0,)), feature,
                                 seed=6)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((100, CFG.n_bins))
        _, cache = net.forward_cached(x, MODE_EVAL_MC, np.random.default_rng(8))
        mask = cache.masks[0]
        assert mask.size == 10_000
        dropped = np.mean(mask == 0.0)
        assert abs(dropped - 0.5) < 0.02
        assert np.all(np.isin(mask, (0.0, 2.0)))

    def test_expectation_matches_eval_preactivation(self):
        """Inverted dropout keeps E[output preact] at the eval preact.

        The output preactivation is linear in the dropout mask, whose mean
        is one, so the Monte-Carlo average over 1000 draws must agree with
        the deterministic eval pass: a fixed random projection gives one
        scalar tested at 4 sigma, and no single entry may stray past 5
        sigma (198 entries make tighter entrywise bands unsound).
        """
        feature = FeatureSpec(context=0)
        dims = [CFG.n_bins, 16, 2 * CFG.n_bins]
        net = MaskNet.initialize(dims, DropoutSpec(0.5, (0,)), feature,
                                 seed=9)
        rng_x = np.random.default_rng(10)
        x = rng_x.standard_normal((3, CFG.n_bins))
        _, cache_eval = net.forward_cached(x, MODE_EVAL)
        z_eval = cache_eval.preacts[-1]
        rng = np.random.default_rng(11)
        draws = np.asarray([
            net.forward_cached(x, MODE_EVAL_MC, rng)[1].preacts[-1]
            for _ in range(1000)
        ])
        proj = np.random.default_rng(12).standard_normal(z_eval.shape)
        scalar = np.sum(draws * proj, axis=(1, 2))
        sem = scalar.std(ddof=1) / np.sqrt(scalar.size)
        assert abs(scalar.mean() - np.sum(z_eval * proj)) <= 4.0 * sem
        mean = draws.mean(axis=0)
        entry_sem = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(mean - z_eval) <= 5.0 * entry_sem + 1e-12)


class TestBackward:
    def test_matches_finite_differences_over_all_parameters(self):
        """d(sum wf^2 + sum loglam^2)/d(theta) via backprop vs central FD."""
        feature = FeatureSpec(context=0)
        f = 2
        cfg = StftConfig(frame_len=2, hop=1, fft_size=2, sample_rate=16000)
        assert cfg.n_bins == f
        dims = [f, 5, 2 * f]
        net = MaskNet.initialize(dims, DropoutSpec(0.0, ()), feature, seed=12)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, f))

        def loss():
            _, cache = net.forward_cached(x, MODE_EVAL)
            return float(np.sum(cache.wf ** 2) + np.sum(cache.loglam ** 2))

        _, cache = net.forward_cached(x, MODE_EVAL)
        grads = net.backward(cache, 2.0 * cache.wf, 2.0 * cache.loglam)
        flat_grads = []
        for dw, db in grads:
            flat_grads.extend((dw, db))
        eps = 1e-6
        for param, analytic in zip(net.parameters(), flat_grads):
            fd = np.zeros_like(param)
            pf, ff = param.ravel(), fd.ravel()
            for i in range(pf.size):
                orig = pf[i]
                pf[i] = orig + eps
                hi = loss()
                pf[i] = orig - eps
                lo = loss()
                pf[i] = orig
                ff[i] = (hi - lo) / (2.0 * eps)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-8)
            assert np.max(np.abs(fd - analytic) / denom) < 1e-4

    def test_clamped_variance_units_get_zero_gradient(self):
        feature = FeatureSpec(context=0)
        dims = [CFG.n_bins, 8, 2 * CFG.n_bins]
        net = _tiny_net(seed=14, hidden=8, context=0)
        rng = np.random.default_rng(15)
        x = 1e4 * rng.standard_normal((6, CFG.n_bins))
        _, cache = net.forward_cached(x, MODE_EVAL)
        f = net.n_bins
        clamped = (cache.loglam == 6.0) | (cache.loglam == -12.0)
        assert np.any(clamped)
        grads = net.backward(cache, np.zeros_like(cache.wf),
                             np.ones_like(cache.loglam))
        # with grad_wf = 0, any parameter influence must flow through
        # unclamped log-variance units only; all-clamped => zero gradients
        if np.all(clamped):
            for dw, db in grads:
                assert np.all(dw == 0.0) and np.all(db == 0.0)


class TestTraining:
    def _pair(self, seed):
        return _utterance(speech_seed=seed, noise_seed=seed + 50)

    def test_same_seed_reproduces_weights_bitwise(self):
        utts = [self._pair(1), self._pair(2)]
        val = [self._pair(3)]
        tc = TrainConfig(max_epochs=2, seed=42)
        runs = []
        for _ in range(2):
            net = _tiny_net(seed=21)
            net, _ = train(net, utts, val, "mse", tc, CFG)
            runs.append([p.copy() for p in net.parameters()])
        for a, b in zip(*runs):
            assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        utts = [self._pair(1)]
        val = [self._pair(3)]
        nets = []
        for s in (0, 1):
            net = _tiny_net(seed=s)
            net, _ = train(net, utts, val, "mse",
                           TrainConfig(max_epochs=1, seed=s), CFG)
            nets.append(net)
        assert not np.array_equal(nets[0].weights[0], nets[1].weights[0])

    def test_memorizes_a_single_utterance(self):
        """200 epochs on one utterance drop the loss below 10% of epoch 0."""
        clean, mix = _utterance(speech_seed=5, noise_seed=6, snr_db=15.0,
                                duration=1.0)
        net = _tiny_net(seed=0)
        tc = TrainConfig(max_epochs=200, patience=200, lr_patience=200,
                         seed=0)
        net, hist = train(net, [(clean, mix)], [(clean, mix)], "mse", tc, CFG)
        assert hist[-1]["train_loss"] < 0.1 * hist[0]["train_loss"]

    def test_history_schema(self):
        utts = [self._pair(1)]
        net = _tiny_net(seed=1)
        net, hist = train(net, utts, utts, "hybrid",
                          TrainConfig(max_epochs=2, seed=0), CFG)
        row = hist[0]
        for key in ("epoch", "train_loss", "val_loss", "lr", "seconds",
                    "train_nll", "train_sisdr"):
            assert key in row
        assert [r["epoch"] for r in hist] == list(range(len(hist)))

    def test_early_stop_and_best_weight_restore(self):
        """Training halts after `patience` stale epochs, halves the step
        size after `lr_patience`, and hands back the best-validation weights.
        """
        rng = np.random.default_rng(16)
        # unlearnable target: validation cannot keep improving for long
        utts = [self._pair(7)]
        val = [(Waveform(rng.standard_normal(8000)),
                self._pair(8)[1])]
        net = _tiny_net(seed=2)
        tc = TrainConfig(max_epochs=60, patience=3, lr_patience=1, lr=0.05,
                         seed=0)
        net, hist = train(net, utts, val, "mse", tc, CFG)
        assert len(hist) < 60
        lrs = [row["lr"] for row in hist]
        assert lrs[-1] < lrs[0]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        restored = validation_loss(net, val, "mse", CFG, beta=0.001)
        best = min(row["val_loss"] for row in hist)
        np.testing.assert_allclose(restored, best, rtol=1e-12)

    def test_divergence_raises_named_error(self):
        clean, mix = self._pair(9)
        net = _tiny_net(seed=3)
        tc = TrainConfig(lr=1e155, max_epochs=5, seed=0)
        with pytest.raises(TrainingDiverged):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                train(net, [(clean, mix)], [(clean, mix)], "mse", tc, CFG)

    def test_input_validation(self):
        utts = [self._pair(1)]
        net = _tiny_net()
        with pytest.raises(ValueError, match="loss"):
            train(net, utts, utts, "huber", TrainConfig(), CFG)
        with pytest.raises(ValueError, match="nonempty"):
            train(net, [], utts, "mse", TrainConfig(), CFG)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestCheckpoint:
    def test_roundtrip_is_bitwise(self, tmp_path):
        net = _tiny_net(seed=17, dropout=DropoutSpec(0.5, (0,)))
        path = tmp_path / "member.npz"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.layer_dims == net.layer_dims
        assert loaded.dropout == net.dropout
        assert loaded.feature == net.feature
        assert loaded.seed == net.seed
        for a, b in zip(net.parameters(), loaded.parameters()):
            assert np.array_equal(a, b)
        _, mix = _utterance()
        spec = stft(mix, CFG)
        before = predict_field(net, spec)
        after = predict_field(loaded, spec)
        assert np.array_equal(before.wf, after.wf)
        assert np.array_equal(before.lam, after.lam)

    def test_unknown_version_rejected(self, tmp_path):
        net = _tiny_net(seed=18)
        path = tmp_path / "member.npz"
        save_checkpoint(net, path)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        arrays["format_version"] = np.array(99, dtype=np.int64)
        tampered = tmp_path / "tampered.npz"
        with open(tampered, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tampered)
