"""Flat key=value experiment configuration.

A config file holds one ``key=value`` per line (``#`` comments and blank
lines allowed). Unknown keys are errors so typos in sweep scripts fail
loudly. CLI flags override file values. Every results file embeds the
resolved config as provenance, except ``output_dir`` which is a runtime
location rather than an experiment parameter.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    # backbone / supernet shape
    d_in: int = 32
    n_layers: int = 8
    hidden_dim: int = 64
    embed_dim: int = 64
    adapter_kind: str = "residual"
    # synthetic benchmark: seen domains are used for meta-train and their
    # test-label split at meta-test; unseen domains appear only at meta-test.
    n_train_domains: int = 5
    n_test_domains: int = 2
    classes_per_domain: int = 40
    split_ratio: float = 0.5
    noise_sigma_min: float = 0.1
    noise_sigma_max: float = 0.5
    transform_scale: float = 1.0
    transform_cond_max: float = 8.0
    unseen_transform_scale: float = 2.0
    dataset_csv: str = ""
    # episode shape
    way_min: int = 3
    way_max: int = 8
    shot_min: int = 1
    shot_max: int = 5
    n_query: int = 10
    # backbone pre-training and supernet training
    pretrain_episodes: int = 2000
    pretrain_lr: float = 0.5
    train_episodes: int = 6000
    eta1: float = 0.5
    eta2: float = 0.05
    # evolutionary search
    population_size: int = 64
    top_m: int = 8
    mutation_rate: float = 0.05
    generations: int = 15
    search_finetune_epochs: int = 20
    episodes_per_eval: int = 1
    shortlist_n: int = 3
    diversity_t: float = 0.4
    # per-episode fine-tuning rates shared by search and meta-test
    ft_eta1: float = 0.5
    ft_eta2: float = 0.05
    # meta-test
    test_finetune_epochs: int = 40
    test_episodes: int = 600
    output_dir: str = "runs/default"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}

# Scaled-down settings for CI-speed runs.
PROFILES: dict[str, dict[str, object]] = {
    "desk": {"population_size": 16, "generations": 10, "test_episodes": 100},
    "paper": {},
}


def _coerce(key: str, raw: str):
    field = _FIELDS.get(key)
    if field is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_assignments(pairs: list[str]) -> dict[str, object]:
    """Parse ``key=value`` strings, validating keys against the config schema."""
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw.strip())
    return out


def load_config_file(path) -> dict[str, object]:
    assignments = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            assignments.append(line)
    return parse_assignments(assignments)


def resolve_config(
    file_path=None,
    profile: str | None = None,
    overrides: dict[str, object] | None = None,
) -> ExperimentConfig:
    """File values, then profile preset, then explicit overrides."""
    values: dict[str, object] = {}
    if file_path:
        values.update(load_config_file(file_path))
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    if overrides:
        for key in overrides:
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
        values.update(overrides)
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.adapter_kind not in ("residual", "offset"):
        raise ConfigError(f"adapter_kind must be residual|offset, got {cfg.adapter_kind!r}")
    if cfg.n_layers < 1 or cfg.n_train_domains < 1:
        raise ConfigError("n_layers and n_train_domains must be >= 1")
    if not (0 < cfg.split_ratio < 1):
        raise ConfigError("split_ratio must be in (0, 1)")
    if cfg.way_min < 2 or cfg.way_min > cfg.way_max:
        raise ConfigError("need 2 <= way_min <= way_max")
    if cfg.shot_min < 1 or cfg.shot_min > cfg.shot_max:
        raise ConfigError("need 1 <= shot_min <= shot_max")


def provenance_lines(cfg: ExperimentConfig) -> list[str]:
    """Sorted key=value lines for embedding into results files."""
    lines = []
    for name in sorted(_FIELDS):
        if name == "output_dir":
            continue
        value = getattr(cfg, name)
        lines.append(f"{name}={value!r}" if isinstance(value, float) else f"{name}={value}")
    return lines
