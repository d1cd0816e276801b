"""Flat key = value run configuration shared by every CLI subcommand.

The document format is one ``key = value`` per line with ``#`` comments.
Unknown keys are rejected; every key has a default, so an empty document
is a complete configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .exceptions import ConfigError


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(",", " ").split())


# key -> (kind, documentation); kinds: int, float, bool, ints
KEY_SPECS: dict[str, tuple[str, str]] = {
    "seed": ("int", "master seed; stage seeds derive from it"),
    "phantom_dims": ("ints", "phantom volume size in voxels (x y z)"),
    "phantom_train_volumes": ("int", "number of training phantoms"),
    "phantom_test_volumes": ("int", "number of held-out phantoms"),
    "phantom_nodules_per_volume": ("int", "annotated nodules per phantom"),
    "phantom_mimics_per_volume": ("int", "hard mimics (tubes, wall bumps) per phantom"),
    "phantom_noise_sigma": ("float", "background Gaussian noise level"),
    "phantom_diameter_min": ("float", "smallest nodule diameter in voxels"),
    "phantom_diameter_max": ("float", "largest nodule diameter in voxels"),
    "fcn_channels": ("ints", "output channels of the 5 screening convolutions"),
    "fcn_batch_size": ("int", "stage-1 batch size before filtering"),
    "fcn_max_iters": ("int", "stage-1 SGD iterations"),
    "fcn_learning_rate": ("float", "stage-1 initial learning rate"),
    "fcn_pos_fraction": ("float", "positive share of each stage-1 batch"),
    "osf_enabled": ("bool", "online sample filtering during stage-1 training"),
    "osf_hard_fraction": ("float", "share of the batch kept as hard samples"),
    "osf_easy_keep_fraction": ("float", "share of the easy remainder kept"),
    "screen_threshold": ("float", "score-volume probability threshold"),
    "nms_radius": ("float", "suppression radius in image voxels"),
    "refine_batch_size": ("int", "stage-2 batch size"),
    "refine_max_iters": ("int", "stage-2 SGD iterations"),
    "refine_learning_rate": ("float", "stage-2 initial learning rate"),
    "refine_pos_fraction": ("float", "positive share of each stage-2 batch"),
    "loss_lambda": ("float", "localization weight in the joint objective"),
    "loss_beta": ("float", "weight-decay coefficient"),
    "decision_threshold": ("float", "refiner probability needed to keep a candidate"),
    "fcn_hard_negative_fraction": ("float", "stage-1 negatives drawn near mimics"),
    "refine_hard_negative_fraction": ("float", "stage-2 negatives drawn near mimics"),
    "augment_enabled": ("bool", "flip/rotate/scale augmentation of positives"),
}


@dataclass
class RunConfig:
    seed: int = 7
    phantom_dims: tuple[int, ...] = (80, 80, 32)
    phantom_train_volumes: int = 24
    phantom_test_volumes: int = 8
    phantom_nodules_per_volume: int = 2
    phantom_mimics_per_volume: int = 6
    phantom_noise_sigma: float = 0.08
    phantom_diameter_min: float = 4.0
    phantom_diameter_max: float = 10.0
    fcn_channels: tuple[int, ...] = (16, 16, 32, 32, 2)
    fcn_batch_size: int = 64
    fcn_max_iters: int = 140
    fcn_learning_rate: float = 0.02
    fcn_pos_fraction: float = 0.5
    osf_enabled: bool = True
    osf_hard_fraction: float = 0.5
    osf_easy_keep_fraction: float = 0.5
    screen_threshold: float = 0.85
    nms_radius: float = 5.0
    refine_batch_size: int = 16
    refine_max_iters: int = 100
    refine_learning_rate: float = 0.02
    refine_pos_fraction: float = 0.5
    loss_lambda: float = 0.5
    loss_beta: float = 1e-4
    decision_threshold: float = 0.5
    fcn_hard_negative_fraction: float = 0.25
    refine_hard_negative_fraction: float = 0.5
    augment_enabled: bool = True

    def set_value(self, key: str, raw: str) -> None:
        if key not in KEY_SPECS:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind, _ = KEY_SPECS[key]
        try:
            if kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            elif kind == "bool":
                value = _parse_bool(raw)
            elif kind == "ints":
                value = _parse_ints(raw)
            else:  # pragma: no cover
                raise ConfigError(f"bad kind {kind} for {key}")
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
        setattr(self, key, value)

    def format_value(self, key: str) -> str:
        value = getattr(self, key)
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return " ".join(str(v) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse a flat key = value document; unknown keys are rejected."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno} is not 'key = value': {line!r}")
        key, _, raw = stripped.partition("=")
        try:
            cfg.set_value(key.strip(), raw.strip())
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Emit every key with its documentation; parse(serialize(c)) == c."""
    lines = ["# noduleforge run configuration"]
    for f in fields(cfg):
        _, doc = KEY_SPECS[f.name]
        lines.append(f"# {doc}")
        lines.append(f"{f.name} = {cfg.format_value(f.name)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r") as f:
        return parse_config(f.read())
