"""Run configuration: plain-text key=value files, CLI-overridable.

Every key in the file can be overridden by a command-line flag of the same
name. The serialized canonical form is hashed to name run directories.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from . import attender as att
from . import encoders as enc

VARIANT_FULL = "full"

# ablation variant names accepted by the CLI
ABLATION_VARIANTS = (
    "overall",
    "token",
    "w/oSchema",
    "seqlabel",
    "w/oBert",
    "w/oAttention",
    "w/SchemaAtt",
    "w/UtteranceAtt",
    "w/oPointer",
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 7
    dtype: str = "float32"

    # encoder stacks (desk-scale defaults; reference profile: hidden 768, 12 layers, 12 heads)
    hidden: int = 64
    attn_hidden: int = 0  # 0 means: same as hidden
    layers: int = 2
    heads: int = 4
    max_len: int = 96
    encoder: str = enc.SELF_ATTENTION
    share_embeddings: bool = False
    dropout: float = 0.1

    # model variant switches
    attention: str = att.OVERALL
    use_schema: bool = True
    seqlabel: bool = False
    pointer: bool = True

    # decoding
    beam: int = 5
    decode_max_len: int = 48
    constrained: bool = False

    # optimization (reference profile: lr 1e-4)
    lr: float = 3e-4
    batch: int = 8
    epochs: int = 30
    clip: float = 5.0
    eval_every: int = 1

    # data handling
    dontcare: bool = True
    keep_unaligned: bool = False
    eval_fuzzy: bool = True
    fuzzy_threshold: float = 0.95

    # paths / runtime
    data: str = ""
    out: str = "runs"
    threads: int = 1

    @property
    def attn_dim(self) -> int:
        return self.attn_hidden or self.hidden

    def validate(self) -> "RunConfig":
        if self.attention not in att.VARIANTS:
            raise ConfigError(f"attention must be one of {att.VARIANTS}, got {self.attention!r}")
        if self.encoder not in (enc.SELF_ATTENTION, enc.BILSTM):
            raise ConfigError(f"encoder must be self_attention or bilstm, got {self.encoder!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.seqlabel and self.use_schema:
            raise ConfigError("seqlabel variant implies use_schema=false")
        if not self.use_schema and self.attention != att.NONE:
            raise ConfigError("use_schema=false bypasses the attender; set attention=none")
        if self.constrained and not self.pointer:
            raise ConfigError("constrained decoding requires the pointer variant")
        if not self.pointer and not self.use_schema:
            raise ConfigError("the fixed-vocabulary variant still needs use_schema=true")
        if self.beam < 1 or self.decode_max_len < 2:
            raise ConfigError("beam must be >= 1 and decode_max_len >= 2")
        if self.batch < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch >= 1, epochs >= 0 and lr > 0 required")
        if not (0 <= self.dropout < 1):
            raise ConfigError("dropout must be in [0, 1)")
        if not (0 < self.fuzzy_threshold <= 1):
            raise ConfigError("fuzzy_threshold must be in (0, 1]")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_TRUE = ("true", "1", "yes", "on")
_BOOL_FALSE = ("false", "0", "no", "off")


def _coerce(key: str, value: str):
    ftype = _FIELDS[key]
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        return float(value)
    if ftype in ("bool", bool):
        v = value.strip().lower()
        if v in _BOOL_TRUE:
            return True
        if v in _BOOL_FALSE:
            return False
        raise ConfigError(f"cannot parse boolean {value!r} for key {key!r}")
    return value


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, str(value)))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:8]


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Rewrite config switches for one named ablation variant."""
    if variant == "overall":
        cfg.attention = att.OVERALL
    elif variant == "token":
        cfg.attention = att.TOKEN
    elif variant == "w/oSchema":
        cfg.use_schema = False
        cfg.attention = att.NONE
        cfg.seqlabel = False
    elif variant == "seqlabel":
        cfg.seqlabel = True
        cfg.use_schema = False
        cfg.attention = att.NONE
    elif variant == "w/oBert":
        cfg.encoder = enc.BILSTM
    elif variant == "w/oAttention":
        cfg.attention = att.NONE
    elif variant == "w/SchemaAtt":
        cfg.attention = att.SCHEMA_ONLY
    elif variant == "w/UtteranceAtt":
        cfg.attention = att.UTTERANCE_ONLY
    elif variant == "w/oPointer":
        cfg.pointer = False
    else:
        raise ConfigError(f"unknown variant {variant!r}; choose from {ABLATION_VARIANTS}")
    return cfg
