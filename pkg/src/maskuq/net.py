"""Dense masking network trained with hand-derived backpropagation.

The net maps context-stacked log-magnitude features to two per-frequency
output heads: a sigmoid gain in (0, 1) and a log-variance clamped to
[-12, 6].  Hidden layers use leaky ReLU (slope 0.2); inverted dropout can be
enabled on chosen hidden layers and stays active in ``eval_mc`` mode so that
repeated stochastic forward passes sample the predictive distribution.

Everything is plain NumPy: forward caches, analytic backward, Adam with L2
weight decay, early stopping on validation loss with learning-rate halving.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import losses
from .spectral import ComplexSpectrogram, StftConfig, Waveform, stft
from .statmodel import PosteriorField

LOGLAM_MIN = -12.0
LOGLAM_MAX = 6.0
LEAKY_SLOPE = 0.2
LOGMAG_FLOOR = 1e-8
STD_FLOOR = 1e-6

MODE_TRAIN = "train"
MODE_EVAL = "eval"
MODE_EVAL_MC = "eval_mc"
_MODES = (MODE_TRAIN, MODE_EVAL, MODE_EVAL_MC)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class FeatureSpec:
    """Context-stacked, per-utterance-normalized log-magnitude features."""

    context: int = 3

    def __post_init__(self) -> None:
        if self.context < 0:
            raise ValueError("context must be nonnegative")

    def feature_dim(self, n_bins: int) -> int:
        return (2 * self.context + 1) * n_bins


def make_features(spec: ComplexSpectrogram, fspec: FeatureSpec) -> np.ndarray:
    """(frames x feature_dim) matrix for one utterance.

    Log magnitudes are normalized by the utterance's own mean/std, then each
    frame is concatenated with ``context`` neighbours on both sides
    (edge-replicated at the boundaries), oldest frame first.
    """
    logmag = np.log(np.maximum(np.abs(spec.coeffs), LOGMAG_FLOOR))
    std = logmag.std()
    norm = (logmag - logmag.mean()) / max(std, STD_FLOOR)
    c = fspec.context
    if c == 0:
        return norm.copy()
    padded = np.pad(norm, ((c, c), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * c + 1, axis=0)
    # windows: (frames, bins, 2c+1) -> (frames, 2c+1, bins) flattened
    return np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(
        spec.n_frames, fspec.feature_dim(spec.n_bins)
    )


@dataclass(frozen=True)
class DropoutSpec:
    """Inverted dropout: which hidden layers drop, and with what rate."""

    p: float = 0.5
    layers: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if any(i < 0 for i in self.layers):
            raise ValueError("layer indices must be nonnegative")

    @classmethod
    def deepest(cls, n_hidden: int, p: float = 0.5) -> "DropoutSpec":
        """Dropout on the deepest hidden layer only (the default placement)."""
        if n_hidden < 1:
            raise ValueError("need at least one hidden layer")
        return cls(p=p, layers=(n_hidden - 1,))


@dataclass
class ForwardCache:
    inputs: list           # h_i fed into each linear layer
    preacts: list          # z_{i+1} per linear layer
    masks: dict            # hidden layer index -> scaled dropout mask
    wf: np.ndarray
    loglam: np.ndarray


class MaskNet:
    """Fully connected gain/variance predictor."""

    def __init__(self, layer_dims: list[int], weights: list[np.ndarray],
                 biases: list[np.ndarray], dropout: DropoutSpec,
                 feature: FeatureSpec, seed: int) -> None:
        if len(layer_dims) < 3:
            raise ValueError("need at least one hidden layer")
        if layer_dims[-1] % 2 != 0:
            raise ValueError("output dim must be even (gain + log-variance)")
        if len(weights) != len(layer_dims) - 1 or len(biases) != len(weights):
            raise ValueError("parameter count does not match layer_dims")
        n_hidden = len(layer_dims) - 2
        if any(i >= n_hidden for i in dropout.layers):
            raise ValueError("dropout layer index out of range")
        self.layer_dims = list(layer_dims)
        self.weights = weights
        self.biases = biases
        self.dropout = dropout
        self.feature = feature
        self.seed = int(seed)

    @classmethod
    def initialize(cls, layer_dims: list[int], dropout: DropoutSpec,
                   feature: FeatureSpec, seed: int) -> "MaskNet":
        """He-style fan-in uniform init for weights, zeros for biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases, dropout, feature, seed)

    @property
    def n_bins(self) -> int:
        return self.layer_dims[-1] // 2

    @property
    def n_hidden(self) -> int:
        return len(self.layer_dims) - 2

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward_cached(self, features: np.ndarray, mode: str = MODE_EVAL,
                       rng: np.random.Generator | None = None
                       ) -> tuple[PosteriorField, ForwardCache]:
        if mode not in _MODES:
            raise ValueError(f"unknown mode {mode!r}")
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.layer_dims[0]:
            raise ValueError(
                f"features must be (n, {self.layer_dims[0]}), got {features.shape}"
            )
        drop_on = mode in (MODE_TRAIN, MODE_EVAL_MC) and self.dropout.p > 0.0
        if drop_on and rng is None:
            raise ValueError("dropout modes need an explicit rng")

        h = features
        inputs, preacts, masks = [], [], {}
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            if i == n_layers - 1:
                break
            h = np.where(z >= 0.0, z, LEAKY_SLOPE * z)
            if drop_on and i in self.dropout.layers:
                keep = 1.0 - self.dropout.p
                mask = (rng.random(h.shape) < keep) / keep
                masks[i] = mask
                h = h * mask
        z_out = preacts[-1]
        if not np.all(np.isfinite(z_out)):
            raise TrainingDiverged("non-finite network outputs")
        f = self.n_bins
        wf = expit(z_out[:, :f])
        loglam = np.clip(z_out[:, f:], LOGLAM_MIN, LOGLAM_MAX)
        fld = PosteriorField(wf, np.exp(loglam))
        return fld, ForwardCache(inputs, preacts, masks, wf, loglam)

    def forward(self, features: np.ndarray, mode: str = MODE_EVAL,
                rng: np.random.Generator | None = None) -> PosteriorField:
        fld, _ = self.forward_cached(features, mode, rng)
        return fld

    def backward(self, cache: ForwardCache, grad_wf: np.ndarray,
                 grad_loglam: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients for a scalar loss given its output-field grads."""
        f = self.n_bins
        dz = np.empty_like(cache.preacts[-1])
        dz[:, :f] = grad_wf * cache.wf * (1.0 - cache.wf)
        z_l = cache.preacts[-1][:, f:]
        inside = (z_l > LOGLAM_MIN) & (z_l < LOGLAM_MAX)
        dz[:, f:] = grad_loglam * inside
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(len(self.weights) - 1, -1, -1):
            h = cache.inputs[i]
            grads.append((h.T @ dz, dz.sum(axis=0)))
            if i == 0:
                break
            dh = dz @ self.weights[i].T
            if i - 1 in cache.masks:
                dh = dh * cache.masks[i - 1]
            z_prev = cache.preacts[i - 1]
            dz = dh * np.where(z_prev >= 0.0, 1.0, LEAKY_SLOPE)
        grads.reverse()
        return grads


def predict_field(net: MaskNet, noisy: ComplexSpectrogram, mode: str = MODE_EVAL,
                  rng: np.random.Generator | None = None) -> PosteriorField:
    """Featurize one utterance and run the net over all its frames."""
    if noisy.n_bins != net.n_bins:
        raise ValueError("spectrogram bin count does not match the net")
    return net.forward(make_features(noisy, net.feature), mode, rng)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    batch_size: int = 64
    patience: int = 10
    lr_patience: int = 3
    max_epochs: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.patience < 1 or self.lr_patience < 1:
            raise ValueError("batch_size and patiences must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.lr = cfg.lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for i, (p, g) in enumerate(zip(params, grads)):
            g = g + self.cfg.weight_decay * p
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)


LOSS_KINDS = ("mse", "sisdr", "hybrid")


def _utterance_loss(loss_kind: str, net: MaskNet, clean: Waveform,
                    mix: Waveform, stft_cfg: StftConfig, beta: float,
                    mode: str, rng: np.random.Generator | None,
                    batch_size: int | None = None):
    """Forward + loss for one utterance; returns (report, cache or None)."""
    noisy = stft(mix, stft_cfg)
    ref = stft(clean, stft_cfg)
    feats = make_features(noisy, net.feature)
    rows = None
    if loss_kind == "mse" and batch_size is not None and noisy.n_frames > batch_size:
        rows = rng.permutation(noisy.n_frames)[:batch_size]
        feats = feats[rows]
    fld, cache = net.forward_cached(feats, mode, rng)
    if loss_kind == "mse":
        if rows is not None:
            ref = ComplexSpectrogram(ref.coeffs[rows], stft_cfg, ref.original_len)
            noisy = ComplexSpectrogram(noisy.coeffs[rows], stft_cfg, noisy.original_len)
        rep = losses.mse(ref, noisy, fld.wf)
    elif loss_kind == "sisdr":
        rep = losses.masked_si_sdr_loss(clean, noisy, fld.wf)
    elif loss_kind == "hybrid":
        rep = losses.hybrid(ref, noisy, fld, clean, beta)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return rep, cache


def validation_loss(net: MaskNet, utterances, loss_kind: str,
                    stft_cfg: StftConfig, beta: float) -> float:
    """Mean per-utterance loss in eval mode (full utterances, no dropout)."""
    total = 0.0
    for clean, mix in utterances:
        rep, _ = _utterance_loss(loss_kind, net, clean, mix, stft_cfg, beta,
                                 MODE_EVAL, None)
        total += rep.value
    return total / len(utterances)


def train(net: MaskNet, train_utts, val_utts, loss_kind: str,
          cfg: TrainConfig, stft_cfg: StftConfig,
          beta: float = losses.DEFAULT_BETA,
          log=None) -> tuple[MaskNet, list[dict]]:
    """Fit the net; returns it with the best-validation weights restored.

    One optimization step per training utterance.  For the frame-wise mse
    loss a random subset of ``cfg.batch_size`` frames forms the step's batch;
    the waveform losses always use the whole utterance.  Per-utterance losses
    carry equal weight.  Early stopping waits ``cfg.patience`` epochs without
    validation improvement; the learning rate halves after ``cfg.lr_patience``
    stale epochs.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if not train_utts or not val_utts:
        raise ValueError("need nonempty train and validation sets")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(), cfg)
    history: list[dict] = []
    best_val = np.inf
    best_params = [p.copy() for p in net.parameters()]
    stale = 0
    lr_stale = 0
    n = len(train_utts)
    for epoch in range(cfg.max_epochs):
        t0 = time.monotonic()
        order = rng.permutation(n)
        train_total = 0.0
        part_totals: dict[str, float] = {}
        for step, idx in enumerate(order):
            clean, mix = train_utts[idx]
            try:
                rep, cache = _utterance_loss(loss_kind, net, clean, mix,
                                             stft_cfg, beta, MODE_TRAIN, rng,
                                             cfg.batch_size)
            except TrainingDiverged as exc:
                raise TrainingDiverged(
                    f"epoch {epoch}, utterance {idx} (step {step}): {exc}"
                ) from exc
            if not np.isfinite(rep.value):
                raise TrainingDiverged(
                    f"non-finite {loss_kind} loss at epoch {epoch}, "
                    f"utterance {idx} (step {step})"
                )
            train_total += rep.value
            for k, v in rep.parts.items():
                part_totals[k] = part_totals.get(k, 0.0) + v
            grads = net.backward(cache, rep.grad_wf, rep.grad_loglam)
            flat = []
            for dw, db in grads:
                flat.extend((dw, db))
            opt.step(net.parameters(), flat)
        try:
            val = validation_loss(net, val_utts, loss_kind, stft_cfg, beta)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"validation at epoch {epoch}: {exc}") from exc
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        row = {
            "epoch": epoch,
            "train_loss": train_total / n,
            "val_loss": val,
            "lr": opt.lr,
            "seconds": time.monotonic() - t0,
        }
        for k, v in part_totals.items():
            row[f"train_{k}"] = v / n
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  train {row['train_loss']:+.4f}  "
                f"val {val:+.4f}  lr {opt.lr:.2e}  {row['seconds']:.1f}s")
        if val < best_val:
            best_val = val
            best_params = [p.copy() for p in net.parameters()]
            stale = 0
            lr_stale = 0
        else:
            stale += 1
            lr_stale += 1
            if lr_stale >= cfg.lr_patience:
                opt.lr *= 0.5
                lr_stale = 0
            if stale >= cfg.patience:
                break
    for p, best in zip(net.parameters(), best_params):
        p[...] = best
    return net, history


def save_checkpoint(net: MaskNet, path) -> None:
    """Versioned binary layout: dims, row-major params, dropout/feature/seed."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "layer_dims": np.array(net.layer_dims, dtype=np.int64),
        "dropout_p": np.array(net.dropout.p, dtype=np.float64),
        "dropout_layers": np.array(net.dropout.layers, dtype=np.int64),
        "feature_context": np.array(net.feature.context, dtype=np.int64),
        "seed": np.array(net.seed, dtype=np.int64),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"weight_{i}"] = np.ascontiguousarray(w)
        arrays[f"bias_{i}"] = np.ascontiguousarray(b)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> MaskNet:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        layer_dims = [int(d) for d in data["layer_dims"]]
        weights = [data[f"weight_{i}"].astype(np.float64)
                   for i in range(len(layer_dims) - 1)]
        biases = [data[f"bias_{i}"].astype(np.float64)
                  for i in range(len(layer_dims) - 1)]
        dropout = DropoutSpec(
            p=float(data["dropout_p"]),
            layers=tuple(int(i) for i in data["dropout_layers"]),
        )
        feature = FeatureSpec(context=int(data["feature_context"]))
        seed = int(data["seed"])
    return MaskNet(layer_dims, weights, biases, dropout, feature, seed)
