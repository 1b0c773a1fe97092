"""Flat ``section.key = value`` configuration.

Every key has a typed default; a config file or ``--set`` override may only
name known keys. Blank lines and ``#`` comments are ignored. The effective
configuration is written back out with :meth:`HailConfig.to_text` so a run
directory always records exactly what produced it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .losses import LossWeights
from .phantom import DEFAULT_PROFILES, SiteProfile, Tissue
from .training import TrainConfig

CONFIG_ECHO_NAME = "config.txt"


class ConfigError(ValueError):
    pass


def _site_defaults(p: SiteProfile) -> dict[str, object]:
    sec = f"site_{p.site_id}"
    lv = {Tissue(k): v for k, v in p.tissue_levels.items()}
    return {
        f"{sec}.csf": lv[Tissue.CSF],
        f"{sec}.lesion": lv[Tissue.LESION],
        f"{sec}.gm": lv[Tissue.GM],
        f"{sec}.wm": lv[Tissue.WM],
        f"{sec}.gamma": p.gamma,
        f"{sec}.bias_coeffs": tuple(float(c) for c in p.bias_coeffs),
        f"{sec}.noise_sigma": p.noise_sigma,
        f"{sec}.global_scale": p.global_scale,
        f"{sec}.global_offset": p.global_offset,
    }


def _phase_defaults(sec: str, epochs: int, lr: float, seed: int, patches_per_volume: int = 2) -> dict[str, object]:
    return {
        f"{sec}.learning_rate": lr,
        f"{sec}.batch_size": 8,
        f"{sec}.epochs": epochs,
        f"{sec}.plateau_factor": 0.8,
        f"{sec}.plateau_patience": 10,
        f"{sec}.plateau_min_delta": 1e-4,
        f"{sec}.weight_decay": 0.01,
        f"{sec}.patches_per_volume": patches_per_volume,
        f"{sec}.pairs_per_epoch": 32,
        f"{sec}.val_patches": 32,
        f"{sec}.seed": seed,
    }


DEFAULTS: dict[str, object] = {
    "phantom.n_per_site": 12,
    "phantom.sites": ("A", "B", "C"),
    "phantom.seed": 0,
    "phantom.edge": 64,
    **{k: v for p in DEFAULT_PROFILES for k, v in _site_defaults(p).items()},
    "data.split_seed": 0,
    "data.phase2_sites": ("A", "B"),
    "data.held_out_site": "C",
    "model.base": 8,
    "model.patch_size": 16,
    "loss.lambda_style": 100.0,
    "loss.lambda_content": 150.0,
    "loss.lambda_consistency": 200.0,
    **_phase_defaults("phase1", 200, 5e-4, 0, 16),
    **_phase_defaults("phase2", 150, 1e-3, 0),
    "eval.mask_policy": "foreground",
    "eval.overlap": 8,
    "eval.batch_size": 32,
    "eval.seen_directions": ("A->B", "B->A"),
    "eval.unseen_directions": ("A->C", "C->A", "B->C", "C->B"),
}


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, default: object) -> object:
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float) or key.endswith("bias_coeffs"):
                return tuple(float(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


@dataclass(frozen=True)
class HailConfig:
    values: Mapping[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    def with_values(self, updates: Mapping[str, object]) -> "HailConfig":
        unknown = sorted(set(updates) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = dict(self.values)
        merged.update(updates)
        return HailConfig(merged)

    def with_overrides(self, assignments: Iterable[str]) -> "HailConfig":
        """Apply ``key=value`` strings (the ``--set`` flag)."""
        updates = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            key, text = item.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            updates[key] = _parse(key, text, DEFAULTS[key])
        return self.with_values(updates)

    # -- serialization ----------------------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in DEFAULTS)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "HailConfig":
        updates = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if "." not in key:
                raise ConfigError(f"{source}:{lineno}: key {key!r} lacks a section")
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
            updates[key] = _parse(key, value, DEFAULTS[key])
        return cls().with_values(updates)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "HailConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), str(path))

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    def echo(self, out_dir: str | os.PathLike) -> None:
        self.write(os.path.join(out_dir, CONFIG_ECHO_NAME))

    # -- typed views ------------------------------------------------------------------------
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            float(self["loss.lambda_style"]),
            float(self["loss.lambda_content"]),
            float(self["loss.lambda_consistency"]),
        )

    def train_config(self, phase: int) -> TrainConfig:
        sec = f"phase{phase}"
        v = self.values
        return TrainConfig(
            phase=phase,
            learning_rate=v[f"{sec}.learning_rate"],
            batch_size=v[f"{sec}.batch_size"],
            epochs=v[f"{sec}.epochs"],
            weights=self.loss_weights(),
            plateau_factor=v[f"{sec}.plateau_factor"],
            plateau_patience=v[f"{sec}.plateau_patience"],
            plateau_min_delta=v[f"{sec}.plateau_min_delta"],
            patch_size=v["model.patch_size"],
            base=v["model.base"],
            seed=v[f"{sec}.seed"],
            weight_decay=v[f"{sec}.weight_decay"],
            patches_per_volume=v[f"{sec}.patches_per_volume"],
            pairs_per_epoch=v[f"{sec}.pairs_per_epoch"],
            val_patches=v[f"{sec}.val_patches"],
        )

    def site_profiles(self) -> tuple[SiteProfile, ...]:
        profiles = []
        for site in self["phantom.sites"]:
            sec = f"site_{site}"
            if f"{sec}.gamma" not in self.values:
                raise ConfigError(f"no site profile keys for site {site!r}")
            v = self.values
            profiles.append(
                SiteProfile(
                    site,
                    {
                        Tissue.CSF: v[f"{sec}.csf"],
                        Tissue.LESION: v[f"{sec}.lesion"],
                        Tissue.GM: v[f"{sec}.gm"],
                        Tissue.WM: v[f"{sec}.wm"],
                    },
                    gamma=v[f"{sec}.gamma"],
                    bias_coeffs=tuple(v[f"{sec}.bias_coeffs"]),
                    noise_sigma=v[f"{sec}.noise_sigma"],
                    global_scale=v[f"{sec}.global_scale"],
                    global_offset=v[f"{sec}.global_offset"],
                )
            )
        return tuple(profiles)
