"""Experiment configuration: typed sections, flat ``key=value`` files, overrides.

A config file holds one ``section.field=value`` pair per line; ``#`` starts a
comment. Top-level keys (``seeds``, ``out``) have no section. Values are
coerced to the field's declared type; floats also accept ``a/b`` fractions so
budgets such as ``8/255`` can be written exactly as intended.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import get_type_hints

OUT_ENV = "BAYESATTACK_OUT"
DEFAULT_OUT = "runs"


class ConfigError(ValueError):
    """Invalid or unknown configuration keys and values (CLI exit code 2)."""


@dataclass
class DataSection:
    kind: str = "bars-image"  # bars-image | blobs | rings | idx | csv
    n: int = 3000
    classes: int = 4
    noise: float = 0.2
    contrast_lo: float = 0.2
    contrast_hi: float = 0.35
    test_fraction: float = 0.3
    images: str = ""  # idx: image file; csv: data file
    labels: str = ""  # idx: label file
    dim: int = 0  # csv: features per row


@dataclass
class ZooSection:
    substitute: str = "convnet:8x16"
    victims: str = "mlp:64,mlp:128,mlp:64x64x32,convnet:12x24"
    allow_same: bool = False


@dataclass
class TrainSection:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 15


@dataclass
class FinetuneSection:
    enabled: bool = True
    lambda_w: float = 0.1
    lambda_e: float = 0.1
    gamma: float = 0.1
    gamma_scaled: bool = False
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 3
    swag_cadence: str = "epoch"
    swag_rank: int = 10


@dataclass
class PosteriorSection:
    param_kind: str = "isotropic"  # isotropic | swag (swag needs fine-tuning)
    sigma: float = 0.1
    sigma_e: float = 0.2
    sigma_e_finetuned: float = 0.2
    swag_alpha: float = 1.0
    swag_beta: float = 0.0
    input_kind: str = "isotropic"  # isotropic | trajectory
    input_alpha: float = 25.0
    allow_swag_both: bool = False


@dataclass
class AttackSection:
    method: str = "ifgsm"  # fgsm | ifgsm | mifgsm
    epsilon: float = 8 / 255
    step: float = 1 / 255
    iterations: int = 50
    decay: float = 1.0
    M: int = 5
    S: int = 5
    sample_scope: str = "example"
    pool_size: int = 200


@dataclass
class GridSection:
    variants: str = "plain,param,input,joint"
    sampling_counts: str = "1,2,5"  # M and S values for the sample-count grid; empty disables it


SECTIONS = {
    "data": DataSection,
    "zoo": ZooSection,
    "train": TrainSection,
    "finetune": FinetuneSection,
    "posterior": PosteriorSection,
    "attack": AttackSection,
    "grid": GridSection,
}
VARIANTS = ("plain", "param", "input", "joint")


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    zoo: ZooSection = field(default_factory=ZooSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    posterior: PosteriorSection = field(default_factory=PosteriorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    grid: GridSection = field(default_factory=GridSection)
    seeds: str = "0,1,2,3,4"
    out: str = ""

    @property
    def seed_list(self) -> list[int]:
        return _int_list(self.seeds, "seeds")

    @property
    def victim_list(self) -> list[str]:
        return [v.strip() for v in self.zoo.victims.split(",") if v.strip()]

    @property
    def variant_list(self) -> list[str]:
        return [v.strip() for v in self.grid.variants.split(",") if v.strip()]

    @property
    def sampling_counts(self) -> list[int]:
        return _int_list(self.grid.sampling_counts, "grid.sampling_counts") if self.grid.sampling_counts.strip() else []

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)

    def items(self) -> list[tuple[str, object]]:
        """All ``(dotted key, value)`` pairs in declaration order."""
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out.extend((f"{f.name}.{g.name}", getattr(v, g.name)) for g in dataclasses.fields(v))
            else:
                out.append((f.name, v))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    def fingerprint(self) -> str:
        """SHA-256 over every setting except the output location."""
        text = "".join(f"{k}={_format(v)}\n" for k, v in self.items() if k != "out")
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        d, a, p = self.data, self.attack, self.posterior
        if d.kind not in ("bars-image", "blobs", "rings", "idx", "csv"):
            raise ConfigError(f"data.kind: unknown source {d.kind!r}")
        if d.kind in ("idx", "csv"):
            needed = [d.images] + ([d.labels] if d.kind == "idx" else [])
            for path in needed:
                if not path or not Path(path).is_file():
                    raise ConfigError(f"data file {path!r} does not exist")
            if d.kind == "csv" and d.dim < 1:
                raise ConfigError("data.dim must be set for csv data")
        if not 0 < d.test_fraction < 1:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        if not self.victim_list:
            raise ConfigError("zoo.victims: need at least one victim")
        if not self.zoo.allow_same and self.zoo.substitute.strip() in self.victim_list:
            raise ConfigError("zoo.victims repeats the substitute architecture (set zoo.allow_same=true to allow)")
        if a.method not in ("fgsm", "ifgsm", "mifgsm"):
            raise ConfigError(f"attack.method: unknown method {a.method!r}")
        if not (a.epsilon > 0 and a.step > 0 and a.iterations >= 1 and a.M >= 1 and a.S >= 1 and a.pool_size >= 1):
            raise ConfigError("attack: epsilon, step, iterations, M, S and pool_size must be positive")
        if a.sample_scope not in ("example", "batch"):
            raise ConfigError(f"attack.sample_scope: unknown scope {a.sample_scope!r}")
        if p.param_kind not in ("isotropic", "swag") or p.input_kind not in ("isotropic", "trajectory"):
            raise ConfigError("posterior.param_kind must be isotropic|swag and posterior.input_kind isotropic|trajectory")
        if p.param_kind == "swag" and not self.finetune.enabled:
            raise ConfigError("posterior.param_kind=swag needs finetune.enabled=true")
        if min(p.sigma, p.sigma_e, p.sigma_e_finetuned) < 0:
            raise ConfigError("posterior scales must be non-negative")
        bad = [v for v in self.variant_list if v not in VARIANTS]
        if bad or not self.variant_list:
            raise ConfigError(f"grid.variants: unknown variants {bad}")
        if not self.seed_list:
            raise ConfigError("seeds: need at least one seed")
        if any(c < 1 for c in self.sampling_counts):
            raise ConfigError("grid.sampling_counts must be positive")
        return self


def _int_list(text: str, key: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str, typ: type):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(Fraction(raw)) if "/" in raw else float(raw)
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def known_keys() -> dict[str, type]:
    keys: dict[str, type] = {}
    for name, cls in SECTIONS.items():
        for fname, typ in get_type_hints(cls).items():
            keys[f"{name}.{fname}"] = typ
    keys["seeds"] = str
    keys["out"] = str
    return keys


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key=value`` pairs; later lines win."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    keys = known_keys()
    cfg = ExperimentConfig()
    for key, raw in pairs.items():
        if key not in keys:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, raw, keys[key])
        if "." in key:
            section, fname = key.split(".", 1)
            setattr(getattr(cfg, section), fname, value)
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``overrides``; validated."""
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        pairs.update(parse_lines(p.read_text(encoding="utf-8"), str(p)))
    pairs.update(overrides or {})
    return build_config(pairs).validate()
