"""End-to-end method recipes tying the pipeline together.

Each named method is a training recipe (loss, member count, dropout) plus
an inference convention (which estimates and uncertainty fields it can
emit).  The functions here do the run-directory bookkeeping: checkpoints,
manifests, enhanced audio, uncertainty grids, metric tables and figures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.random import default_rng

from . import losses, reports
from .config import RunConfig, write_resolved
from .data import load_split, wav_read, wav_write
from .ensemble import (PredictionSet, average_amap, combine_epistemic,
                       combine_total, deep_ensemble_train, ensemble_predict,
                       mc_dropout_predict, read_ensemble_manifest,
                       write_ensemble_manifest)
from .evaluation import (UtteranceEval, mean_ci95, pooled_evaluation,
                         si_sdr_metric)
from .net import (MODE_EVAL_MC, DropoutSpec, FeatureSpec, MaskNet,
                  load_checkpoint, predict_field, save_checkpoint)
from .spectral import ComplexSpectrogram, StftConfig, Waveform, istft, stft
from .statmodel import PosteriorField

UNCERTAINTY_SOURCES = ("aleatoric", "epistemic", "total")


@dataclass(frozen=True)
class MethodRecipe:
    """Training and inference conventions for one named method.

    ``n_members`` of 0 means "use the config's member count".  ``mc_eval``
    methods sample dropout at inference for their epistemic estimate.
    """

    name: str
    loss_kind: str
    n_members: int
    uses_dropout: bool
    mc_eval: bool
    aleatoric: bool


METHODS = {
    "baseline_wf": MethodRecipe("baseline_wf", "mse", 1, False, False, False),
    "baseline_sisdr": MethodRecipe("baseline_sisdr", "sisdr", 1, False, False,
                                   False),
    "aleatoric": MethodRecipe("aleatoric", "hybrid", 1, False, False, True),
    "mc_dropout": MethodRecipe("mc_dropout", "mse", 1, True, True, False),
    "deep_ensembles": MethodRecipe("deep_ensembles", "mse", 0, False, False,
                                   False),
    "de_aleatoric": MethodRecipe("de_aleatoric", "hybrid", 0, False, False,
                                 True),
}


def get_recipe(name: str) -> MethodRecipe:
    if name not in METHODS:
        known = ", ".join(sorted(METHODS))
        raise ValueError(f"unknown method {name!r}; known methods: {known}")
    return METHODS[name]


def run_dir_for(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / cfg.method


def _member_seeds(cfg: RunConfig, recipe: MethodRecipe) -> list[int]:
    count = recipe.n_members if recipe.n_members else cfg.n_members
    return [cfg.seed + i for i in range(count)]


def _dropout_for(cfg: RunConfig, recipe: MethodRecipe) -> DropoutSpec:
    if recipe.uses_dropout and cfg.dropout_p > 0:
        return DropoutSpec.deepest(len(cfg.hidden_dims), cfg.dropout_p)
    return DropoutSpec(0.0, ())


# ---------------------------------------------------------------------------
# training


def train_method(cfg: RunConfig, log=None) -> Path:
    """Train all members of ``cfg.method`` and write the run directory.

    Produces ``member_XX.npz`` checkpoints, a member manifest, per-member
    history CSVs and figures, and the resolved config.
    """
    recipe = get_recipe(cfg.method)
    stft_cfg = cfg.stft_config()
    train_utts = load_split(cfg.corpus_dir, "train")
    val_utts = load_split(cfg.corpus_dir, "val")
    seeds = _member_seeds(cfg, recipe)
    nets, histories = deep_ensemble_train(
        cfg.layer_dims(stft_cfg.n_bins), _dropout_for(cfg, recipe),
        cfg.feature_spec(), train_utts, val_utts, recipe.loss_kind,
        cfg.train_config(), stft_cfg, seeds, beta=cfg.beta, log=log)

    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (net, hist) in enumerate(zip(nets, histories)):
        name = f"member_{i:02d}.npz"
        save_checkpoint(net, run_dir / name)
        reports.write_history_csv(run_dir / f"history_{i:02d}.csv", hist)
        reports.history_figure(run_dir / f"history_{i:02d}.svg", hist,
                               f"{cfg.method} member {i}")
        entries.append((name, seeds[i]))
    write_ensemble_manifest(run_dir / "members.txt", entries)
    write_resolved(cfg, run_dir)
    return run_dir


def load_members(run_dir: str | Path) -> list[MaskNet]:
    run_dir = Path(run_dir)
    manifest = run_dir / "members.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no trained members under {run_dir}")
    return [load_checkpoint(run_dir / name)
            for name, _seed in read_ensemble_manifest(manifest)]


# ---------------------------------------------------------------------------
# enhancement


def _predict(cfg: RunConfig, recipe: MethodRecipe, nets: list[MaskNet],
             noisy: ComplexSpectrogram) -> PredictionSet:
    if recipe.mc_eval:
        return mc_dropout_predict(nets[0], noisy, cfg.mc_passes, cfg.seed)
    return ensemble_predict(nets, noisy)


def _has_epistemic(cfg: RunConfig, recipe: MethodRecipe) -> bool:
    return recipe.mc_eval or (recipe.n_members == 0 and cfg.n_members > 1)


def enhance_one(cfg: RunConfig, recipe: MethodRecipe, nets: list[MaskNet],
                mix: Waveform, out_dir: Path, utt_id: str,
                clean: Waveform | None = None) -> dict:
    """Enhance one utterance; writes WAVs and uncertainty grids.

    Always writes ``<id>_wf.wav``; aleatoric methods add ``<id>_amap.wav``
    and an aleatoric grid; sampling methods add an epistemic grid; methods
    with both add the total grid.  With a reference, the squared-error grid
    of the mean estimate is written for sparsification analysis.
    """
    stft_cfg = cfg.stft_config()
    noisy = stft(mix, stft_cfg)
    preds = _predict(cfg, recipe, nets, noisy)
    combined = (combine_total(preds) if preds.has_aleatoric
                else combine_epistemic(preds))
    mean_spec = ComplexSpectrogram(combined.mean, stft_cfg, len(mix))
    written = {}

    wf_wave = istft(mean_spec)
    wav_write(out_dir / f"{utt_id}_wf.wav", wf_wave)
    written["wf"] = wf_wave

    if recipe.aleatoric:
        mags = average_amap(preds, noisy)
        amap_coeffs = mags * np.exp(1j * np.angle(noisy.coeffs))
        amap_wave = istft(ComplexSpectrogram(amap_coeffs, stft_cfg, len(mix)))
        wav_write(out_dir / f"{utt_id}_amap.wav", amap_wave)
        written["amap"] = amap_wave
        reports.write_grid(out_dir / f"{utt_id}_aleatoric.csv",
                           combined.aleatoric_mean)
    if _has_epistemic(cfg, recipe):
        reports.write_grid(out_dir / f"{utt_id}_epistemic.csv",
                           combined.epistemic)
    if recipe.aleatoric and _has_epistemic(cfg, recipe):
        reports.write_grid(out_dir / f"{utt_id}_total.csv", combined.total)
    if clean is not None:
        ref = stft(clean, stft_cfg)
        err = np.abs(combined.mean - ref.coeffs) ** 2
        reports.write_grid(out_dir / f"{utt_id}_error_wf.csv", err)
    return written


def enhance_split(cfg: RunConfig, split: str, log=None) -> Path:
    """Enhance every utterance of a corpus split into the run directory."""
    recipe = get_recipe(cfg.method)
    run_dir = run_dir_for(cfg)
    nets = load_members(run_dir)
    utts = load_split(cfg.corpus_dir, split)
    out = run_dir / f"enhanced_{split}"
    out.mkdir(parents=True, exist_ok=True)
    for utt in utts:
        enhance_one(cfg, recipe, nets, utt.mix, out, utt.utt_id,
                    clean=utt.clean)
        if log is not None:
            log(f"enhanced {split}/{utt.utt_id}")
    write_resolved(cfg, out)
    return out


def enhance_file(cfg: RunConfig, input_path: str | Path, log=None) -> Path:
    """Enhance a single WAV without a reference."""
    recipe = get_recipe(cfg.method)
    run_dir = run_dir_for(cfg)
    nets = load_members(run_dir)
    mix = wav_read(input_path)
    out = run_dir / "enhanced_input"
    out.mkdir(parents=True, exist_ok=True)
    utt_id = Path(input_path).stem
    enhance_one(cfg, recipe, nets, mix, out, utt_id, clean=None)
    if log is not None:
        log(f"enhanced {input_path} -> {out}")
    write_resolved(cfg, out)
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate_split(cfg: RunConfig, split: str) -> Path:
    """SI-SDR table (mean and 95% CI per input SNR) for one enhanced split.

    Rows cover the unprocessed mixture and every estimate the method wrote
    (wf, and amap when present), per SNR plus a pooled "all" row.
    """
    recipe = get_recipe(cfg.method)
    run_dir = run_dir_for(cfg)
    enhanced = run_dir / f"enhanced_{split}"
    if not enhanced.is_dir():
        raise FileNotFoundError(f"no enhanced outputs under {enhanced}")
    utts = load_split(cfg.corpus_dir, split)
    estimators = ["mix", "wf"] + (["amap"] if recipe.aleatoric else [])

    values: dict[str, list[tuple[float, float]]] = {e: [] for e in estimators}
    for utt in utts:
        values["mix"].append((utt.snr_db, si_sdr_metric(utt.clean, utt.mix)))
        wf = wav_read(enhanced / f"{utt.utt_id}_wf.wav")
        values["wf"].append((utt.snr_db, si_sdr_metric(utt.clean, wf)))
        if recipe.aleatoric:
            amap = wav_read(enhanced / f"{utt.utt_id}_amap.wav")
            values["amap"].append((utt.snr_db, si_sdr_metric(utt.clean, amap)))

    snrs = sorted({snr for snr, _ in values["mix"]})
    rows = []
    series = {}
    for est in estimators:
        means, cis = [], []
        for snr in snrs:
            vals = [v for s, v in values[est] if s == snr]
            mean, ci = mean_ci95(vals)
            rows.append({"estimator": est, "snr_db": repr(snr), "n": len(vals),
                         "si_sdr_mean": repr(mean), "si_sdr_ci95": repr(ci)})
            means.append(mean)
            cis.append(ci)
        mean, ci = mean_ci95([v for _, v in values[est]])
        rows.append({"estimator": est, "snr_db": "all",
                     "n": len(values[est]), "si_sdr_mean": repr(mean),
                     "si_sdr_ci95": repr(ci)})
        series[est] = (snrs, means, cis)

    eval_dir = run_dir / f"eval_{split}"
    eval_dir.mkdir(parents=True, exist_ok=True)
    reports.write_metrics_csv(eval_dir / "metrics.csv", rows)
    reports.sisdr_figure(eval_dir / "si_sdr.svg", series,
                         f"{cfg.method} on {split}")
    write_resolved(cfg, eval_dir)
    return eval_dir


# ---------------------------------------------------------------------------
# sparsification analysis


def _pooled_for_source(cfg: RunConfig, split: str, source: str,
                       n_fractions: int = 100):
    run_dir = run_dir_for(cfg)
    enhanced = run_dir / f"enhanced_{split}"
    if not enhanced.is_dir():
        raise FileNotFoundError(f"no enhanced outputs under {enhanced}")
    utts = load_split(cfg.corpus_dir, split)
    entries = []
    for utt in utts:
        unc_path = enhanced / f"{utt.utt_id}_{source}.csv"
        if not unc_path.exists():
            raise FileNotFoundError(
                f"method {cfg.method!r} wrote no {source!r} uncertainty for "
                f"{utt.utt_id}; nothing at {unc_path}")
        err = reports.read_grid(enhanced / f"{utt.utt_id}_error_wf.csv")
        unc = reports.read_grid(unc_path)
        wf = wav_read(enhanced / f"{utt.utt_id}_wf.wav")
        entries.append(UtteranceEval(err.ravel(), unc.ravel(),
                                     si_sdr_metric(utt.clean, wf)))
    return pooled_evaluation(entries, n_fractions=n_fractions)


def sparsify_split(cfg: RunConfig, split: str, source: str, log=None) -> dict:
    """Pooled sparsification curve and AUSE for one uncertainty source.

    Writes the curve CSV and figure into the run's eval directory and
    returns a summary dict.  When asked for the total uncertainty it also
    computes the single-source AUSE values and warns (without failing) if
    the total does not improve on both.
    """
    if source not in UNCERTAINTY_SOURCES:
        known = ", ".join(UNCERTAINTY_SOURCES)
        raise ValueError(f"unknown uncertainty source {source!r}; "
                         f"expected one of: {known}")
    report = _pooled_for_source(cfg, split, source)
    run_dir = run_dir_for(cfg)
    eval_dir = run_dir / f"eval_{split}"
    eval_dir.mkdir(parents=True, exist_ok=True)
    csv_path = eval_dir / f"sparsification_{source}.csv"
    reports.write_curve_csv(csv_path, report.measured, report.oracle,
                            report.ause)
    reports.sparsification_figure(eval_dir / f"sparsification_{source}.svg",
                                  report.measured, report.oracle,
                                  f"{cfg.method} {source} on {split}")
    write_resolved(cfg, eval_dir)
    summary = {"source": source, "ause": report.ause,
               "n_bins": report.n_bins, "csv": str(csv_path)}
    if source == "total":
        for other in ("aleatoric", "epistemic"):
            summary[f"ause_{other}"] = _pooled_for_source(cfg, split,
                                                          other).ause
        floor = min(summary["ause_aleatoric"], summary["ause_epistemic"])
        if report.ause > floor:
            msg = (f"total-uncertainty AUSE {report.ause:.4f} does not "
                   f"improve on best single source {floor:.4f}")
            warnings.warn(msg)
            if log is not None:
                log(f"warning: {msg}")
    if log is not None:
        log(f"{cfg.method} {split} {source}: ause {report.ause:.6f} "
            f"over {report.n_bins} bins")
    return summary


# ---------------------------------------------------------------------------
# gradient checking


def _fd_rel_err(loss_fn, param: np.ndarray, grad: np.ndarray,
                step: float = 1e-6) -> float:
    """Relative error of ``grad`` vs central differences over ``param``.

    Measured in the vector infinity norm, max|fd - g| / max(|fd|, |g|),
    rather than per coordinate: central differences cannot certify a
    coordinate whose gradient sits below the cancellation noise floor
    (machine eps times the loss magnitude over the step), so a
    per-coordinate quotient turns that noise into spurious failures.
    """
    flat = param.ravel()
    gflat = np.asarray(grad).ravel()
    worst_abs = 0.0
    scale = 1e-8
    for i in range(flat.size):
        keep = flat[i]
        h = step * max(1.0, abs(keep))
        flat[i] = keep + h
        hi = loss_fn()
        flat[i] = keep - h
        lo = loss_fn()
        flat[i] = keep
        fd = (hi - lo) / (2 * h)
        worst_abs = max(worst_abs, float(abs(fd - gflat[i])))
        scale = max(scale, abs(fd), float(abs(gflat[i])))
    return worst_abs / scale


def run_gradcheck(seed: int = 0, corrupt: bool = False,
                  tol: float = 1e-4) -> tuple[bool, list[dict]]:
    """Finite-difference audit of every analytic gradient path.

    Uses a small 9-bin, 8-frame instance.  ``corrupt`` perturbs each
    analytic gradient before comparison; the suite must then fail, which
    guards the checker itself.  Returns (passed, per-path rows).
    """
    rng = default_rng(seed)
    stft_cfg = StftConfig(frame_len=16, hop=8, fft_size=16)
    n = 56
    clean = Waveform(rng.standard_normal(n) * 0.1)
    mix = Waveform(clean.samples + rng.standard_normal(n) * 0.05)
    ref = stft(clean, stft_cfg)
    noisy = stft(mix, stft_cfg)
    shape = noisy.coeffs.shape
    wf = 1.0 / (1.0 + np.exp(-rng.standard_normal(shape)))
    loglam = rng.uniform(-4.0, 0.0, shape)
    bend = 1.0 + 5e-3 if corrupt else 1.0

    rows = []

    def add(name, max_err, n_checked):
        rows.append({"name": name, "max_rel_err": max_err,
                     "n_checked": n_checked, "tol": tol,
                     "passed": bool(max_err < tol)})

    rep = losses.mse(ref, noisy, wf)
    add("mse/wf", _fd_rel_err(lambda: losses.mse(ref, noisy, wf).value,
                              wf, rep.grad_wf * bend), wf.size)

    def nll_value():
        return losses.nll_posterior(
            ref, noisy, PosteriorField(wf, np.exp(loglam))).value

    rep = losses.nll_posterior(ref, noisy, PosteriorField(wf, np.exp(loglam)))
    err = max(_fd_rel_err(nll_value, wf, rep.grad_wf * bend),
              _fd_rel_err(nll_value, loglam, rep.grad_loglam * bend))
    add("nll/wf+loglam", err, 2 * wf.size)

    rep = losses.masked_si_sdr_loss(clean, noisy, wf)
    add("sisdr/wf",
        _fd_rel_err(lambda: losses.masked_si_sdr_loss(clean, noisy, wf).value,
                    wf, rep.grad_wf * bend), wf.size)

    def amap_value():
        fld = PosteriorField(wf, np.exp(loglam))
        wave, _ = losses.amap_synthesis(noisy, fld)
        return losses.si_sdr_loss(clean, wave).value

    fld = PosteriorField(wf, np.exp(loglam))
    wave, cache = losses.amap_synthesis(noisy, fld)
    rep = losses.si_sdr_loss(clean, wave)
    g_wf, g_loglam = losses.amap_synthesis_backward(rep.grad_est, cache)
    err = max(_fd_rel_err(amap_value, wf, g_wf * bend),
              _fd_rel_err(amap_value, loglam, g_loglam * bend))
    add("amap/wf+loglam", err, 2 * wf.size)

    feature = FeatureSpec(context=1)
    dims = [feature.feature_dim(stft_cfg.n_bins), 12, 2 * stft_cfg.n_bins]
    dropout = DropoutSpec.deepest(1, 0.5)
    net = MaskNet.initialize(dims, dropout, feature, seed=seed + 1)

    def net_loss():
        fld = predict_field(net, noisy, MODE_EVAL_MC, default_rng(seed + 2))
        return losses.hybrid(ref, noisy, fld, clean).value

    from .net import make_features
    feats = make_features(noisy, feature)
    fld_n, fcache = net.forward_cached(feats, MODE_EVAL_MC,
                                       default_rng(seed + 2))
    rep = losses.hybrid(ref, noisy, fld_n, clean)
    grads = net.backward(fcache, rep.grad_wf, rep.grad_loglam)
    worst = 0.0
    n_checked = 0
    for (dw, db), w, b in zip(grads, net.weights, net.biases):
        worst = max(worst, _fd_rel_err(net_loss, w, dw * bend))
        worst = max(worst, _fd_rel_err(net_loss, b, db * bend))
        n_checked += w.size + b.size
    add("hybrid/net+istft", worst, n_checked)

    return all(r["passed"] for r in rows), rows
