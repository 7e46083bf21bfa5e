"""Flat ``key=value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .backbone import BackboneConfig
from .errors import ConfigError
from .synth import LABELS, SynthConfig
from .train import TrainConfig

# key -> (section, field name, parser)
_KEYS: dict[str, tuple[str, str, type]] = {
    "seed": ("common", "seed", int),
    "n_train": ("splits", "train", int),
    "n_val": ("splits", "val", int),
    "n_test": ("splits", "test", int),
    "bag_min": ("synth", "bag_min", int),
    "bag_max": ("synth", "bag_max", int),
    "d_in": ("synth", "d_in", int),
    "signal_strength": ("synth", "signal_strength", float),
    "noise_sigma": ("synth", "noise_sigma", float),
    "planted_min": ("synth", "planted_min", float),
    "planted_max": ("synth", "planted_max", float),
    "co_plant": ("synth", "co_plant", float),
    "n_patches": ("backbone", "N", int),
    "d_model": ("backbone", "d_model", int),
    "n_blocks_shared": ("backbone", "n_blocks_shared", int),
    "n_blocks_branch": ("backbone", "n_blocks_branch", int),
    "n_heads": ("backbone", "n_heads", int),
    "d_ff": ("backbone", "d_ff", int),
    "d_attn": ("backbone", "d_attn", int),
    "alpha": ("backbone", "alpha", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "eps": ("train", "eps", float),
    "weight_decay": ("train", "weight_decay", float),
    "lambda_lc": ("train", "lambda_lc", float),
    "lambda_dcc": ("train", "lambda_dcc", float),
    "K0": ("train", "K0", int),
    "m0": ("train", "m0", int),
    "beta": ("train", "beta", float),
    "tau": ("train", "tau", float),
}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_kv(text, str(path))


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    splits: dict[str, int] = field(default_factory=lambda: {"train": 600, "val": 100, "test": 100})
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_values(cls, values: Mapping[str, str]) -> "RunConfig":
        sections: dict[str, dict] = {"common": {}, "splits": {}, "synth": {}, "backbone": {}, "train": {}}
        marginals = dict(SynthConfig().marginals)
        correlation = dict(SynthConfig().correlation)
        for key, raw in values.items():
            try:
                if key.startswith("marginal."):
                    name = key.split(".", 1)[1]
                    if name not in LABELS:
                        raise ConfigError(f"unknown marginal {name!r}")
                    marginals[name] = float(raw)
                    continue
                if key.startswith("corr."):
                    correlation[key.split(".", 1)[1]] = float(raw)
                    continue
                if key not in _KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
                section, name, kind = _KEYS[key]
                sections[section][name] = kind(raw)
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        seed = sections["common"].get("seed", 0)
        s = sections["synth"]
        base = SynthConfig()
        try:
            synth = SynthConfig(
                n_cases=sections["splits"].get("train", 600),
                bag_size_range=(s.get("bag_min", base.bag_size_range[0]), s.get("bag_max", base.bag_size_range[1])),
                d_in=s.get("d_in", base.d_in),
                marginals=marginals,
                correlation=correlation,
                signal_strength=s.get("signal_strength", base.signal_strength),
                noise_sigma=s.get("noise_sigma", base.noise_sigma),
                planted_fraction=(s.get("planted_min", base.planted_fraction[0]), s.get("planted_max", base.planted_fraction[1])),
                co_plant=s.get("co_plant", base.co_plant),
                seed=seed,
            )
            backbone = BackboneConfig(d_in=synth.d_in, **sections["backbone"])
            train = TrainConfig(seed=seed, **sections["train"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        splits = {"train": 600, "val": 100, "test": 100, **sections["splits"]}
        if any(v < 0 for v in splits.values()):
            raise ConfigError("split sizes must be non-negative")
        return cls(synth, splits, backbone, train)

    @classmethod
    def load(cls, path=None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        values = read_kv(path) if path else {}
        values.update(overrides or {})
        return cls.from_values(values)


def backbone_to_kv(cfg: BackboneConfig) -> dict[str, str]:
    out = {
        "n_patches": cfg.N, "d_in": cfg.d_in, "d_model": cfg.d_model,
        "n_blocks_shared": cfg.n_blocks_shared, "n_blocks_branch": cfg.n_blocks_branch,
        "n_heads": cfg.n_heads, "alpha": repr(cfg.alpha),
    }
    if cfg.d_ff is not None:
        out["d_ff"] = cfg.d_ff
    if cfg.d_attn is not None:
        out["d_attn"] = cfg.d_attn
    return {k: str(v) for k, v in out.items()}


def backbone_from_kv(values: Mapping[str, str]) -> BackboneConfig:
    kw = {}
    for key in ("n_patches", "d_in", "d_model", "n_blocks_shared", "n_blocks_branch", "n_heads", "d_ff", "d_attn", "alpha"):
        if key in values:
            name = "N" if key == "n_patches" else key
            kw[name] = float(values[key]) if key == "alpha" else int(values[key])
    return BackboneConfig(**kw)


def train_to_kv(cfg: TrainConfig) -> dict[str, str]:
    keys = ("epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "lambda_lc", "lambda_dcc", "K0", "m0", "beta", "tau", "seed")
    return {k: repr(getattr(cfg, k)) for k in keys if getattr(cfg, k) is not None}
