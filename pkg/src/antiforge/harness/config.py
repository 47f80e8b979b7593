"""Experiment configuration: YAML in, validated frozen dataclasses out.

Example::

    seed: 0
    out_dir: results
    data: {directory: null, size: 128, n_images: 32}
    surrogate: {kind: toy, seed: 1}
    labels: [black_hair, blond_hair, brown_hair]
    attacks:
      antiforge: {epsilon: 0.05, learning_rate: 1.0e-4, iterations: 500}
      pgd: {iterations: 10}
      cw: {}

See README.md for every key.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..attacks import ATTACKS, AttackConfig
from ..colorspace import ColorSpaceTag
from ..surrogate import DEFAULT_LABELS, ConditionalGenerator, IdentityGenerator, ToyGenerator, ToyGeneratorParams
from ..surrogate import ConvNetGenerator, load_weights

SURROGATE_KINDS = ("toy", "identity", "convnet")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "results",
    "workers": 1,
    "chunk_size": 8,
    "data": {"directory": None, "size": 128, "n_images": 32},
    "surrogate": {"kind": "toy", "seed": 1},
    "labels": None,
    "attacks": {"antiforge": {}, "pgd": {}, "cw": {}},
    "robustness": {"jpeg_quality": 75, "jpeg_epsilon": 0.1, "blur_sigma": 3.0, "eot_sigmas": [1.0, 2.0, 3.0]},
    "transfer": {
        "method": "antiforge",
        "surrogates": [
            {"kind": "toy", "seed": 1},
            {"kind": "toy", "seed": 2},
            {"kind": "toy", "seed": 3, "sigma0": 2.0},
        ],
    },
    "colorspace": {
        "spaces": ["RGB", "Lab", "HSV", "CMYK"],
        "jpeg_quality": 75,
        "blur_sigmas": [1.0, 2.0, 3.0],
        "lid_k": 10,
        "lid_size": 32,
    },
    "ablation": {"epsilons": [0.01, 0.03, 0.05, 0.07, 0.1]},
    "spectra": {"image_index": 0, "label": 0, "cutoff": 0.25},
}

# These keys change where or how fast a run happens, never what it computes.
_UNHASHED = ("out_dir", "workers")


class ConfigError(ValueError):
    pass


def _merge(base: Mapping[str, Any], override: Mapping[str, Any], path: str = "") -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        # attack and surrogate sections hold open-ended mappings
        if isinstance(base[key], dict) and isinstance(value, Mapping) and key not in ("attacks", "surrogate"):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "toy"
    seed: int = 1
    gain: float | None = None
    sigma0: float | None = None
    n_labels: int = len(DEFAULT_LABELS)
    weights: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Path) -> "SurrogateSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown surrogate keys: {sorted(unknown)}")
        spec = cls(**dict(d))
        if spec.kind not in SURROGATE_KINDS:
            raise ConfigError(f"surrogate kind must be one of {SURROGATE_KINDS}, got {spec.kind!r}")
        if spec.kind == "convnet":
            if not spec.weights:
                raise ConfigError("convnet surrogate needs a 'weights' file")
            path = Path(spec.weights)
            if not path.is_absolute():
                path = base_dir / path
            if not path.is_file():
                raise ConfigError(f"surrogate weight file not found: {path}")
            spec = cls(**{**spec.__dict__, "weights": str(path)})
        return spec

    def build(self) -> ConditionalGenerator:
        if self.kind == "identity":
            return IdentityGenerator(self.n_labels)
        if self.kind == "convnet":
            return ConvNetGenerator(load_weights(self.weights))
        kw = {k: v for k, v in (("gain", self.gain), ("sigma0", self.sigma0)) if v is not None}
        return ToyGenerator(ToyGeneratorParams.from_seed(self.seed, n_labels=self.n_labels, **kw))

    @property
    def name(self) -> str:
        if self.kind == "convnet":
            return f"convnet:{Path(self.weights).stem}"
        if self.kind == "identity":
            return "identity"
        extra = "".join(f"_{k}{v:g}" for k, v in (("g", self.gain), ("s", self.sigma0)) if v is not None)
        return f"toy{self.seed}{extra}"

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict[str, Any]
    seed: int
    out_dir: Path
    workers: int
    chunk_size: int
    data_dir: Path | None
    size: int
    n_images: int
    surrogate: SurrogateSpec
    labels: tuple[int, ...] | None
    attacks: dict[str, AttackConfig]
    transfer_surrogates: tuple[SurrogateSpec, ...]
    section: dict[str, dict[str, Any]] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def label_names(self, model: ConditionalGenerator) -> list[str]:
        labels = self.labels if self.labels is not None else tuple(range(model.n_labels))
        names = DEFAULT_LABELS if model.n_labels == len(DEFAULT_LABELS) else ()
        return [names[c] if c < len(names) else f"label{c}" for c in labels]

    def attack_config(self, method: str, seed: int, **overrides) -> AttackConfig:
        cfg = self.attacks[method]
        return AttackConfig.from_dict({**cfg.to_dict(), "seed": seed, **overrides})


def hashable_config(raw: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in raw.items() if k not in _UNHASHED}


def config_hash(raw: Mapping[str, Any]) -> str:
    blob = json.dumps(hashable_config(raw), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _resolve_labels(labels, n_labels: int) -> tuple[int, ...] | None:
    if labels is None:
        return None
    if not isinstance(labels, (list, tuple)) or not labels:
        raise ConfigError("labels must be a non-empty list of names or indices")
    out = []
    for item in labels:
        if isinstance(item, str):
            if item not in DEFAULT_LABELS:
                raise ConfigError(f"unknown label {item!r}; known labels are {DEFAULT_LABELS}")
            item = DEFAULT_LABELS.index(item)
        if not isinstance(item, int) or not 0 <= item < n_labels:
            raise ConfigError(f"label {item!r} out of range for {n_labels} labels")
        out.append(item)
    return tuple(out)


def build_config(overrides: Mapping[str, Any] | None = None, base_dir: "str | Path" = ".") -> ExperimentConfig:
    """Merge ``overrides`` onto the defaults and validate."""
    base_dir = Path(base_dir)
    raw = _merge(DEFAULTS, overrides or {})
    try:
        seed = int(raw["seed"])
        workers = int(raw["workers"])
        chunk = int(raw["chunk_size"])
        size = int(raw["data"]["size"])
        n_images = int(raw["data"]["n_images"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric config value: {exc}") from None
    if workers < 1 or chunk < 1:
        raise ConfigError("workers and chunk_size must be >= 1")
    if size < 11 or n_images < 1:
        raise ConfigError("data.size must be >= 11 (SSIM window) and data.n_images >= 1")

    data_dir = raw["data"]["directory"]
    if data_dir is not None:
        data_dir = Path(data_dir)
        if not data_dir.is_absolute():
            data_dir = base_dir / data_dir
        if not data_dir.is_dir():
            raise ConfigError(f"dataset directory not found: {data_dir}")

    surrogate = SurrogateSpec.from_dict(raw["surrogate"], base_dir)
    if not isinstance(raw["attacks"], Mapping) or not raw["attacks"]:
        raise ConfigError("attacks must map method names to settings")
    attacks = {}
    for method, settings in raw["attacks"].items():
        if method not in ATTACKS:
            raise ConfigError(f"unknown attack {method!r}; expected one of {tuple(ATTACKS)}")
        try:
            attacks[method] = AttackConfig.from_dict(settings or {}, method=method)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attacks.{method}: {exc}") from None

    transfer_specs = tuple(SurrogateSpec.from_dict(s, base_dir) for s in raw["transfer"]["surrogates"])
    if len(transfer_specs) < 2:
        raise ConfigError("transfer needs at least two surrogates")
    if raw["transfer"]["method"] not in ATTACKS:
        raise ConfigError(f"transfer.method must be one of {tuple(ATTACKS)}, got {raw['transfer']['method']!r}")
    for space in raw["colorspace"]["spaces"]:
        try:
            ColorSpaceTag.parse(space)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not raw["ablation"]["epsilons"]:
        raise ConfigError("ablation.epsilons must be non-empty")
    raw["out_dir"] = str(raw["out_dir"])
    if data_dir is not None:
        raw["data"]["directory"] = str(data_dir)
    raw["surrogate"] = surrogate.to_dict()
    raw["transfer"]["surrogates"] = [s.to_dict() for s in transfer_specs]
    return ExperimentConfig(
        raw=raw,
        seed=seed,
        out_dir=Path(raw["out_dir"]),
        workers=workers,
        chunk_size=chunk,
        data_dir=data_dir,
        size=size,
        n_images=n_images,
        surrogate=surrogate,
        labels=_resolve_labels(raw["labels"], surrogate.n_labels),
        attacks=attacks,
        transfer_surrogates=transfer_specs,
        section={k: raw[k] for k in ("robustness", "transfer", "colorspace", "ablation", "spectra")},
    )


def load_config(path: "str | Path | None" = None, **overrides: Any) -> ExperimentConfig:
    """Read a YAML config (or start from defaults) and apply top-level overrides."""
    data: dict[str, Any] = {}
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        base_dir = path.parent
    data.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(data, base_dir)
