"""Epistemic uncertainty from repeated stochastic or independent predictions.

A PredictionSet holds M per-bin complex estimates of the clean coefficient
(the gain applied to the noisy input), optionally with each member's aleatoric
variance.  Members come either from dropout kept on at inference or from
independently trained nets.  Combination follows the law of total variance:
the spread of the member means is the epistemic part, the averaged member
variance the aleatoric part, and their sum the total.  ``total`` is stored as
exactly ``epistemic + aleatoric_mean`` so the decomposition holds bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .net import (MODE_EVAL, MODE_EVAL_MC, MaskNet, TrainConfig,
                  TrainingDiverged, make_features, train)
from .spectral import ComplexSpectrogram, StftConfig
from .statmodel import amap_gain


@dataclass
class MemberPrediction:
    """One model's view of an utterance: S~ = wf * X, plus wf and lam."""

    wiener_est: np.ndarray
    gain: np.ndarray
    lam: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.wiener_est = np.asarray(self.wiener_est, dtype=np.complex128)
        self.gain = np.asarray(self.gain, dtype=np.float64)
        if self.gain.shape != self.wiener_est.shape:
            raise ValueError("gain shape must match the estimate")
        if self.lam is not None:
            self.lam = np.asarray(self.lam, dtype=np.float64)
            if self.lam.shape != self.wiener_est.shape:
                raise ValueError("lam shape must match the estimate")


@dataclass
class PredictionSet:
    """M member predictions of the same utterance plus their source route."""

    members: list[MemberPrediction]
    source: str = ""

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("need at least one member")
        shape = self.members[0].wiener_est.shape
        if any(m.wiener_est.shape != shape for m in self.members):
            raise ValueError("member shapes must match")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def has_aleatoric(self) -> bool:
        return all(m.lam is not None for m in self.members)


@dataclass
class CombinedPrediction:
    """Member mean and the variance split: epistemic, aleatoric, total.

    ``amap_mean`` holds the member-averaged magnitude estimate when a
    caller computes it (see ``average_amap``).
    """

    mean: np.ndarray
    epistemic: np.ndarray
    aleatoric_mean: np.ndarray | None = None
    total: np.ndarray | None = None
    amap_mean: np.ndarray | None = None


def _canonical_sum(stack: np.ndarray) -> np.ndarray:
    """Sum over the member axis, invariant to member order bitwise.

    Summands are sorted before reduction, so any permutation of members
    reduces in the identical order.  Complex arrays sum their real and
    imaginary parts independently (each is a plain sum of reals).
    """
    if np.iscomplexobj(stack):
        return (_canonical_sum(stack.real)
                + 1j * _canonical_sum(stack.imag))
    return np.add.reduce(np.sort(stack, axis=0), axis=0)


def mc_dropout_predict(net: MaskNet, noisy: ComplexSpectrogram, m: int,
                       seed: int) -> PredictionSet:
    """M stochastic forward passes with dropout kept on (eval_mc mode).

    A net with dropout rate zero simply yields m identical members (and
    therefore zero spread).
    """
    if m < 1:
        raise ValueError("need at least one pass")
    feats = make_features(noisy, net.feature)
    rng = np.random.default_rng(seed)
    members = []
    for _ in range(m):
        fld = net.forward(feats, MODE_EVAL_MC, rng)
        members.append(MemberPrediction(fld.wf * noisy.coeffs, fld.wf, fld.lam))
    return PredictionSet(members, source="mc_dropout")


def ensemble_predict(nets: list[MaskNet],
                     noisy: ComplexSpectrogram) -> PredictionSet:
    """One deterministic eval forward per independently trained net."""
    if not nets:
        raise ValueError("need at least one net")
    members = []
    for net in nets:
        feats = make_features(noisy, net.feature)
        fld = net.forward(feats, MODE_EVAL)
        members.append(MemberPrediction(fld.wf * noisy.coeffs, fld.wf, fld.lam))
    return PredictionSet(members, source="deep_ensemble")


def deep_ensemble_train(layer_dims, dropout, feature, train_utts, val_utts,
                        loss_kind: str, base_cfg: TrainConfig,
                        stft_cfg: StftConfig, seeds, beta: float = 0.001,
                        log=None) -> tuple[list[MaskNet], list[list[dict]]]:
    """Train one net per seed; seeds must be distinct.

    Each member gets a fresh initialization and data order derived from its
    own seed; everything else (architecture, config, data) is shared.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("member seeds must be distinct")
    nets, histories = [], []
    for s in seeds:
        net = MaskNet.initialize(list(layer_dims), dropout, feature, seed=s)
        cfg = replace(base_cfg, seed=s)
        member_log = None
        if log is not None:
            member_log = lambda msg, _s=s: log(f"[seed {_s}] {msg}")
        try:
            net, hist = train(net, train_utts, val_utts, loss_kind, cfg,
                              stft_cfg, beta=beta, log=member_log)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"member with seed {s}: {exc}") from exc
        nets.append(net)
        histories.append(hist)
    return nets, histories


def _member_mean(preds: PredictionSet) -> np.ndarray:
    stack = np.stack([m.wiener_est for m in preds.members])
    return _canonical_sum(stack) / len(preds)


def combine_epistemic(preds: PredictionSet) -> CombinedPrediction:
    """Empirical mean and population variance of the member estimates.

    epistemic = (1/M) sum |S~_m - mean|^2 (complex squared modulus,
    divisor M, not M-1).
    """
    mean = _member_mean(preds)
    devs = np.stack([(m.wiener_est - mean).real ** 2
                     + (m.wiener_est - mean).imag ** 2
                     for m in preds.members])
    return CombinedPrediction(mean=mean,
                              epistemic=_canonical_sum(devs) / len(preds))


def combine_total(preds: PredictionSet) -> CombinedPrediction:
    """Law-of-total-variance combination; requires member aleatoric variances.

    total = epistemic + mean of member lams, computed and stored in exactly
    that order so ``total == epistemic + aleatoric_mean`` holds bitwise.
    """
    if not preds.has_aleatoric:
        raise ValueError("members lack aleatoric variances")
    combined = combine_epistemic(preds)
    aleatoric_mean = _canonical_sum(
        np.stack([m.lam for m in preds.members])) / len(preds)
    return CombinedPrediction(
        mean=combined.mean,
        epistemic=combined.epistemic,
        aleatoric_mean=aleatoric_mean,
        total=combined.epistemic + aleatoric_mean,
    )


def average_amap(preds: PredictionSet, noisy: ComplexSpectrogram) -> np.ndarray:
    """Member-averaged approximate-MAP magnitude estimate.

    (1/M) sum amap_gain(wf_m, lam_m, |X|) * |X|.
    """
    if not preds.has_aleatoric:
        raise ValueError("members lack aleatoric variances")
    xmag = np.abs(noisy.coeffs)
    stack = np.stack([amap_gain(m.gain, m.lam, xmag) * xmag
                      for m in preds.members])
    return _canonical_sum(stack) / len(preds)


def write_ensemble_manifest(path, entries: list[tuple[str, int]]) -> None:
    """Line-oriented member list: ``<checkpoint-filename> <seed>`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# checkpoint seed\n")
        for name, seed in entries:
            fh.write(f"{name} {seed}\n")


def read_ensemble_manifest(path) -> list[tuple[str, int]]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, seed = line.rsplit(" ", 1)
            entries.append((name, int(seed)))
    if not entries:
        raise ValueError(f"no members listed in {path}")
    return entries
