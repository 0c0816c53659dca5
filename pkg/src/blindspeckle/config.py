"""Run configuration: INI files with section headers, overridden by flags.

Precedence, lowest first: built-in defaults, the ``--config`` file, then
command-line flags (dedicated flags and generic ``--set section.key=value``).
The resolved configuration is rendered back to INI text in a fixed order so
it can be echoed, diffed, and fed to a rerun unchanged.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .network import ArchConfig, BlindSpotShape

__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "parse_schedule", "format_schedule"]


class ConfigError(ValueError):
    """Bad configuration file or override; maps to exit code 1."""


# Section -> ordered (key, default) pairs.  Every value is stored as text.
DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "deterministic": "false", "threads": "1"},
    "simulate": {
        "source": "",
        "looks": "1",
        "correlated": "false",
        "whiten": "false",
        "psf_sigma_v": "1.0",
        "psf_sigma_h": "0.3",
        "psf_size": "5",
        "whiten_eps": "1e-4",
    },
    "arch": {k: str(v) for k, v in ArchConfig().as_dict().items()},
    "train": {
        "dataset": "",
        "variant": "noisy",
        "batch_size": "16",
        "patch_size": "64",
        "lr": "1e-4",
        "lr_decay_steps": "10000",
        "lr_decay_factor": "0.1",
        "lambda_tv": "5e-5",
        "shape_schedule": "1x1:1.0",
        "looks": "1",
        "iterations": "20000",
        "margin": "auto",
        "augment": "false",
        "log_interval": "100",
        "checkpoint_interval": "1000",
        "resume": "",
        "precision": "single",
    },
    "despeckle": {"checkpoint": "", "input": "", "looks": "1", "tile": "256", "prior_mean": "false"},
    "eval": {
        "estimates": "",
        "noisy": "",
        "reference": "",
        "suffix": "_despeckled",
        "looks": "1",
        "margin": "0",
        "windows": "3",
        "window": "24",
        "peak": "255",
    },
    "gradcheck": {
        "precision": "double",
        "probes": "20",
        "size": "32",
        "blind_spot_size": "16",
        "likelihood_cases": "50",
        "corrupt_shift": "false",
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_schedule(text: str) -> tuple[tuple[BlindSpotShape, float], ...]:
    """``"3x1:0.9,1x1:0.1"`` -> ((shape, p), ...).  Asymmetric shapes use ``/``
    between shifts, e.g. ``2/1/1/1:1.0``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        spec, sep, p = item.rpartition(":")
        if not sep:
            spec, p = item, "1.0"
        try:
            out.append((BlindSpotShape.parse(spec.replace("/", ",")), float(p)))
        except ValueError as exc:
            raise ConfigError(f"bad shape schedule entry {item!r}: {exc}") from exc
    if not out:
        raise ConfigError("empty shape schedule")
    return tuple(out)


def format_schedule(schedule) -> str:
    return ",".join(f"{s.label().replace(',', '/')}:{p!r}" for s, p in schedule)


@dataclass
class RunConfig:
    values: dict[str, dict[str, str]] = field(
        default_factory=lambda: {s: dict(kv) for s, kv in DEFAULTS.items()})
    explicit: set = field(default_factory=set)  # "section.key" set by file or flag

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            cp = configparser.ConfigParser(interpolation=None)
            try:
                cp.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            for section in cp.sections():
                for key, value in cp.items(section):
                    cfg.set(section, key, value)
        for item in overrides or []:
            cfg.set_item(item)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        section, key = section.strip().lower(), key.strip().lower()
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self.values[section][key] = str(value).strip()
        self.explicit.add(f"{section}.{key}")

    def set_item(self, item: str) -> None:
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        self.set(section, key, value)

    # typed access

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def get_int(self, section: str, key: str) -> int:
        v = self.get(section, key)
        try:
            return int(v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}") from exc

    def get_float(self, section: str, key: str) -> float:
        v = self.get(section, key)
        try:
            return float(v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number, got {v!r}") from exc

    def get_bool(self, section: str, key: str) -> bool:
        v = self.get(section, key).lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {v!r}")

    def get_path(self, section: str, key: str) -> Path | None:
        v = self.get(section, key)
        return Path(v) if v else None

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed")

    def arch(self) -> ArchConfig:
        a = ArchConfig(
            n_blocks=self.get_int("arch", "n_blocks"),
            channels=self.get_int("arch", "channels"),
            kernel=self.get_int("arch", "kernel"),
            nonlocal_every=self.get_int("arch", "nonlocal_every"),
            nonlocal_q=self.get_int("arch", "nonlocal_q"),
            slope=self.get_float("arch", "slope"),
        )
        try:
            a.validate()
        except ValueError as exc:
            raise ConfigError(f"[arch] {exc}") from exc
        return a

    def arch_is_explicit(self) -> bool:
        return any(k.startswith("arch.") for k in self.explicit)

    def training(self):
        from .trainer import TrainingConfig

        margin = self.get("train", "margin").lower()
        return TrainingConfig(
            batch_size=self.get_int("train", "batch_size"),
            patch_size=self.get_int("train", "patch_size"),
            lr=self.get_float("train", "lr"),
            lr_decay_steps=self.get_int("train", "lr_decay_steps"),
            lr_decay_factor=self.get_float("train", "lr_decay_factor"),
            lambda_tv=self.get_float("train", "lambda_tv"),
            shape_schedule=parse_schedule(self.get("train", "shape_schedule")),
            L=self.get_float("train", "looks"),
            total_iterations=self.get_int("train", "iterations"),
            seed=self.seed,
            margin=None if margin in ("", "auto") else self.get_int("train", "margin"),
            augment=self.get_bool("train", "augment"),
            log_interval=self.get_int("train", "log_interval"),
            checkpoint_interval=self.get_int("train", "checkpoint_interval"),
        )

    def to_ini(self, sections=None) -> str:
        lines = []
        for section, kv in self.values.items():
            if sections is not None and section not in sections:
                continue
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in kv.items())
            lines.append("")
        return "\n".join(lines)
