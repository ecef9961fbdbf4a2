"""Run configuration: typed keys, plain-text files, flag and env overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .cyclization import LENGTH_RANGE, CyclizationType
from .errors import ConfigError, ContractViolation

SEED_ENV_VAR = "CPSDE_SEED"

_TRUE_WORDS = {"1", "true", "yes", "on"}
_FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # noise schedule
    beta_min: float = 0.01
    beta_max: float = 3.0
    # network (shared by the structure net and the router trunk)
    k_neighbors: int = 16
    n_layers: int = 4
    hidden_dim: int = 64
    time_embed_dim: int = 16
    pocket_radius: float = 10.0
    # optimizer
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    # training
    train_steps: int = 2000
    dataset_dir: str = ""
    n_synthetic: int = 8
    log_every: int = 100
    # sampling
    n_steps: int = 1000
    ctype: str = "h2t"
    min_residues: int = 0        # 0 means: the ctype's default lower bound
    max_residues: int = 0        # 0 means: the ctype's default upper bound
    samples_per_length: int = 1
    seed: int = 0
    # paths
    out_dir: str = "out"
    denoiser_checkpoint: str = ""
    router_checkpoint: str = ""
    target: str = ""             # record file whose receptor is the pocket
    # mechanism toggles
    no_harmonic: bool = False
    fix_seq: str = ""            # dash-joined codes; empty means routed
    random_seq: bool = False


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def config_keys() -> tuple[str, ...]:
    return tuple(_FIELD_TYPES)


def coerce_value(key: str, text: str):
    """Parse the textual value of a known key into its field type."""
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key '{key}'")
    text = text.strip()
    if kind == "bool":
        low = text.lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise ConfigError(f"key '{key}' expects a boolean, got '{text}'")
    try:
        if kind == "int":
            return int(text, 10)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"key '{key}' expects {kind}, got '{text}'") from exc
    return text


def apply_overrides(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    updates = {key: coerce_value(key, value) for key, value in pairs.items()}
    return dataclasses.replace(config, **updates)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """`key = value` lines; `#` starts a comment; unknown keys are errors."""
    config = base or RunConfig()
    updates: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            coerce_value(key, value)  # key and type checked here for the line number
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
        updates[key] = value
    return apply_overrides(config, updates)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file '{path}': {exc}") from exc
    return parse_config_text(text, base=base)


def resolve_seed(config: RunConfig) -> int:
    """The seed actually used; the environment wins over file and flags."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return config.seed
    try:
        return int(raw, 10)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, "
                          f"got '{raw}'") from exc


def cyclization_type(config: RunConfig) -> CyclizationType:
    try:
        return CyclizationType.from_name(config.ctype)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc


def length_span(config: RunConfig) -> tuple[int, int]:
    """Inclusive residue-count range to sample, defaulted per ctype."""
    lo_default, hi_default = LENGTH_RANGE[cyclization_type(config)]
    lo = config.min_residues or lo_default
    hi = config.max_residues or hi_default
    if not lo_default <= lo <= hi <= hi_default:
        raise ConfigError(f"residue range [{lo}, {hi}] outside the "
                          f"{config.ctype} range [{lo_default}, {hi_default}]")
    return lo, hi


def validate(config: RunConfig) -> RunConfig:
    def need(ok: bool, message: str) -> None:
        if not ok:
            raise ConfigError(message)

    need(config.beta_min > 0.0, "beta_min must be positive")
    need(config.beta_max > config.beta_min, "beta_max must exceed beta_min")
    need(config.k_neighbors >= 1, "k_neighbors must be >= 1")
    need(config.n_layers >= 1, "n_layers must be >= 1")
    need(config.hidden_dim >= 1, "hidden_dim must be >= 1")
    need(config.time_embed_dim >= 2 and config.time_embed_dim % 2 == 0,
         "time_embed_dim must be a positive even number")
    need(config.pocket_radius > 0.0, "pocket_radius must be positive")
    need(config.learning_rate > 0.0, "learning_rate must be positive")
    need(0.0 <= config.beta1 < 1.0, "beta1 must lie in [0, 1)")
    need(0.0 <= config.beta2 < 1.0, "beta2 must lie in [0, 1)")
    need(config.weight_decay >= 0.0, "weight_decay must be >= 0")
    need(config.train_steps >= 1, "train_steps must be >= 1")
    need(config.n_synthetic >= 1 or bool(config.dataset_dir),
         "need n_synthetic >= 1 or a dataset_dir")
    need(config.log_every >= 1, "log_every must be >= 1")
    need(config.n_steps >= 2, "n_steps must be >= 2")
    need(config.samples_per_length >= 1, "samples_per_length must be >= 1")
    need(not (config.fix_seq and config.random_seq),
         "fix_seq and random_seq are mutually exclusive")
    cyclization_type(config)
    length_span(config)
    return config
