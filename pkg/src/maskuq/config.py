"""Flat key=value run configuration shared by every command.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment.  Unknown keys are rejected by name.  Every command writes the
fully resolved configuration next to its outputs so a run can be audited
and reproduced from the directory alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .net import FeatureSpec, TrainConfig
from .spectral import StftConfig


@dataclass(frozen=True)
class RunConfig:
    # analysis/synthesis
    sample_rate: int = 16000
    frame_len: int = 512
    hop: int = 256
    fft_size: int = 512
    # features and network
    feature_context: int = 3
    hidden_dims: tuple[int, ...] = (256, 256)
    dropout_p: float = 0.5
    # training
    loss: str = "mse"
    method: str = "baseline_wf"
    beta: float = 0.001
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 10
    lr_patience: int = 3
    # uncertainty sampling
    n_members: int = 4
    mc_passes: int = 8
    # corpus
    corpus_dir: str = "corpus"
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    duration_s: float = 3.0
    # run
    out_dir: str = "runs"
    seed: int = 0

    def stft_config(self) -> StftConfig:
        return StftConfig(frame_len=self.frame_len, hop=self.hop,
                          fft_size=self.fft_size, sample_rate=self.sample_rate)

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(context=self.feature_context)

    def layer_dims(self, n_bins: int) -> list[int]:
        feat = self.feature_spec().feature_dim(n_bins)
        return [feat, *self.hidden_dims, 2 * n_bins]

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           lr_patience=self.lr_patience,
                           seed=self.seed if seed is None else seed)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "tuple[int, ...]":
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value, "
                             f"got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, val.strip())
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for "
                             f"{key!r}: {exc}") from None
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    return parse_config_text(p.read_text(), source=str(p))


def apply_overrides(cfg: RunConfig, seed: int | None = None,
                    out_dir: str | None = None, method: str | None = None,
                    corpus_dir: str | None = None) -> RunConfig:
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out_dir is not None:
        updates["out_dir"] = out_dir
    if method is not None:
        updates["method"] = method
    if corpus_dir is not None:
        updates["corpus_dir"] = corpus_dir
    return replace(cfg, **updates) if updates else cfg


def resolved_text(cfg: RunConfig) -> str:
    lines = ["# resolved configuration"]
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, directory: str | Path) -> Path:
    path = Path(directory) / "config_resolved.txt"
    path.write_text(resolved_text(cfg))
    return path
