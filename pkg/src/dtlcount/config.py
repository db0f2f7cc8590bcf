"""Experiment configuration: one INI file drives every command.

Sections are ``[source]``, ``[target]``, ``[synthesis]``, ``[training]``,
``[transfer]`` and ``[output]``. Every key has a default, so an empty file
is a valid experiment; unknown sections or keys are hard errors rather than
silent no-ops. Each run writes its fully-resolved configuration next to its
outputs so the run can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .data import DomainSpec, toy_source_spec, toy_target_spec
from .errors import ConfigError, DataError
from .model import ModelConfig
from .synthesis import GanConfig, SynthesisConfig

# ---------------------------------------------------------------------------
# typed key schema
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_pair(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_int_pair(text: str):
    lo, hi = _parse_pair(text)
    return int(lo), int(hi)


def _parse_size(text: str):
    parts = [p.strip() for p in text.lower().split("x")]
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_triple(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_int_triple(text: str):
    return tuple(int(v) for v in _parse_triple(text))


_PARSERS = {
    "str": str.strip, "int": lambda t: int(t.strip()), "float": float,
    "bool": _parse_bool, "pair": _parse_pair, "int_pair": _parse_int_pair,
    "size": _parse_size, "triple": _parse_triple, "int_triple": _parse_int_triple,
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# One row per key: section -> {key: (type, default)}. The defaults define
# the built-in toy source->target benchmark.
_SOURCE = toy_source_spec()
_TARGET = toy_target_spec()

SCHEMA = {
    "source": {
        "name": ("str", _SOURCE.name),
        "image_size": ("size", _SOURCE.image_size),
        "channels": ("int", _SOURCE.channels),
        "count_mean": ("float", _SOURCE.count_mean),
        "count_std": ("float", _SOURCE.count_std),
        "cell_kind": ("str", _SOURCE.cell_kind),
        "cell_radius": ("pair", _SOURCE.cell_radius_range),
        "cell_intensity": ("pair", _SOURCE.cell_intensity_range),
        "cell_polarity": ("int", _SOURCE.cell_polarity),
        "background_kind": ("str", _SOURCE.background_kind),
        "background_level": ("pair", _SOURCE.background_level_range),
        "speckle": ("pair", _SOURCE.speckle_range),
        "n_images": ("int", 40),
        "n_test": ("int", 6),
    },
    "target": {
        "name": ("str", _TARGET.name),
        "image_size": ("size", _TARGET.image_size),
        "channels": ("int", _TARGET.channels),
        "count_mean": ("float", _TARGET.count_mean),
        "count_std": ("float", _TARGET.count_std),
        "cell_kind": ("str", _TARGET.cell_kind),
        "cell_radius": ("pair", _TARGET.cell_radius_range),
        "cell_intensity": ("pair", _TARGET.cell_intensity_range),
        "cell_polarity": ("int", _TARGET.cell_polarity),
        "background_kind": ("str", _TARGET.background_kind),
        "background_level": ("pair", _TARGET.background_level_range),
        "speckle": ("pair", _TARGET.speckle_range),
        "n_few": ("int", 5),
        "n_test": ("int", 8),
    },
    "synthesis": {
        "num_images": ("int", 80),
        "count_range": ("int_pair", (4, 16)),
        "min_center_distance": ("float", 5.0),
        "generated_patches": ("int", 32),
        "include_real_patches": ("bool", True),
        "hard_paste": ("bool", False),
        "augment_patches": ("bool", True),
        "augment_styles": ("bool", True),
        "scale_range": ("pair", (0.8, 1.2)),
        "sigma": ("float", 3.0),
        "gan_steps": ("int", 600),
        "gan_learning_rate": ("float", 2e-4),
        "gan_batch_size": ("int", 8),
        "gan_latent_dim": ("int", 32),
        "gan_hidden": ("int", 128),
    },
    "training": {
        "base_width": ("int", 8),
        "extractor_blocks": ("int", 2),
        "attention_reduction": ("int", 4),
        "density_scale": ("float", 100.0),
        "batch_size": ("int", 4),
    },
    "transfer": {
        "stage_epochs": ("int_triple", (40, 20, 25)),
        "stage_lrs": ("triple", (1e-3, 1e-4, 1e-5)),
        "direct_epochs": ("int", 100),
        "direct_lr": ("float", 2e-3),
        "ablation": ("str", "none"),
        "seed": ("int", 0),
        "n_seeds": ("int", 3),
    },
    "output": {
        "out_dir": ("str", "runs/latest"),
        "figures": ("bool", True),
    },
}


@dataclass
class ExperimentConfig:
    """Resolved experiment settings, one attribute per schema section."""

    source: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    # ---- construction ----

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls(**{section: {key: default for key, (_, default) in keys.items()}
                      for section, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=origin)
        except configparser.Error as exc:
            raise ConfigError(f"{origin}: {exc}") from exc
        resolved = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(
                    f"{origin}: unknown section [{section}]; known sections: "
                    f"{', '.join(SCHEMA)}")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(
                        f"{origin}: unknown key {key!r} in [{section}]; known "
                        f"keys: {', '.join(SCHEMA[section])}")
                kind, _ = SCHEMA[section][key]
                try:
                    value = _PARSERS[kind](raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(
                        f"{origin}: bad value for {key} in [{section}]: {exc}") from exc
                getattr(resolved, section)[key] = value
        resolved.validate()
        return resolved

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, origin=str(path))

    # ---- validation and overrides ----

    def validate(self) -> None:
        try:
            self.to_domain_spec("source")
            self.to_domain_spec("target")
            self.to_synthesis_config()
            self.to_model_config()
        except DataError as exc:
            raise ConfigError(str(exc)) from exc
        if self.transfer["ablation"] not in ("none", "no_disentangle",
                                             "no_synth", "joint_finetune"):
            raise ConfigError(f"unknown ablation {self.transfer['ablation']!r}")
        for key in ("n_images", "n_test"):
            if self.source[key] < 0:
                raise ConfigError(f"[source] {key} must be >= 0")
        if self.target["n_few"] < 1:
            raise ConfigError("[target] n_few must be >= 1")
        if self.target["n_test"] < 1:
            raise ConfigError("[target] n_test must be >= 1")
        if self.transfer["n_seeds"] < 1:
            raise ConfigError("[transfer] n_seeds must be >= 1")
        if self.transfer["seed"] < 0:
            raise ConfigError("[transfer] seed must be >= 0")

    def override(self, seed=None, out=None, ablation=None) -> "ExperimentConfig":
        clone = ExperimentConfig(**{f.name: dict(getattr(self, f.name))
                                    for f in fields(self)})
        if seed is not None:
            clone.transfer["seed"] = int(seed)
        if out is not None:
            clone.output["out_dir"] = str(out)
        if ablation is not None:
            clone.transfer["ablation"] = str(ablation)
        clone.validate()
        return clone

    # ---- adapters into module config types ----

    def to_domain_spec(self, section: str) -> DomainSpec:
        values = getattr(self, section)
        return DomainSpec(
            name=values["name"], image_size=values["image_size"],
            channels=values["channels"], count_mean=values["count_mean"],
            count_std=values["count_std"], cell_kind=values["cell_kind"],
            cell_radius_range=values["cell_radius"],
            cell_intensity_range=values["cell_intensity"],
            cell_polarity=values["cell_polarity"],
            background_kind=values["background_kind"],
            background_level_range=values["background_level"],
            speckle_range=values["speckle"],
            seed=self.transfer["seed"])

    def to_synthesis_config(self, seed: int | None = None) -> SynthesisConfig:
        s = self.synthesis
        return SynthesisConfig(
            num_images=s["num_images"], count_range=s["count_range"],
            gan=GanConfig(latent_dim=s["gan_latent_dim"], hidden=s["gan_hidden"],
                          steps=s["gan_steps"], learning_rate=s["gan_learning_rate"],
                          batch_size=s["gan_batch_size"]),
            generated_patches=s["generated_patches"],
            include_real_patches=s["include_real_patches"],
            min_center_distance=s["min_center_distance"],
            hard_paste=s["hard_paste"], augment_patches=s["augment_patches"],
            augment_styles=s["augment_styles"], scale_range=s["scale_range"],
            sigma=s["sigma"], seed=self.transfer["seed"] if seed is None else seed)

    def to_model_config(self) -> ModelConfig:
        t = self.training
        return ModelConfig(
            input_channels=self.source["channels"], base_width=t["base_width"],
            extractor_blocks=t["extractor_blocks"],
            attention_reduction=t["attention_reduction"],
            density_scale=t["density_scale"])

    # ---- serialization ----

    def to_ini_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            parser[section] = {}
            values = getattr(self, section)
            for key, (kind, _) in keys.items():
                value = values[key]
                if kind == "size":
                    parser[section][key] = f"{value[0]}x{value[1]}"
                else:
                    parser[section][key] = _format_value(value)
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def write_resolved(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_ini_text())
