"""Layered pipeline configuration: defaults < config file < command-line flags.

The document is plain ``key=value`` text with dotted keys; unknown keys and
values that do not parse as the default's type are rejected before any
work starts.
"""

from __future__ import annotations

import math
from pathlib import Path

from .formats import parse_kv
from .errors import IoError

DEFAULTS: dict[str, object] = {
    # scanner
    "scanner.n_views": 6,
    "scanner.radius": 0.5,
    "scanner.resolution": 256,
    "scanner.fov_deg": 45.0,
    "scanner.max_view_angle": 180.0,
    "scanner.elevation_min": -90.0,
    "scanner.elevation_max": 90.0,
    "scanner.per_view_budget": 4096,
    "scanner.depth_sigma": 0.0,
    "scanner.dropout_rate": 0.0,
    "scanner.vpp_rot_sigma": 0.0,
    "scanner.vpp_trans_sigma": 0.0,
    # align
    "align.occlusion_fraction": 0.02,
    "align.icp_max_iterations": 50,
    "align.icp_tolerance": 1e-9,
    "align.icp_trim_fraction": 0.2,
    "align.icp_max_correspondence_dist": math.inf,
    "align.max_icp_points": 10_000,
    # completion network
    "completion.n_in": 1024,
    "completion.n_scaffold": 128,
    "completion.n_gen_coarse": 128,
    "completion.n_fine": 2048,
    "completion.latent_dim": 128,
    "completion.n_heads": 4,
    "completion.n_encoder_blocks": 2,
    "completion.n_refine_blocks": 2,
    "completion.seed": 0,
    # training
    "train.epochs": 8,
    "train.batch_size": 8,
    "train.lr": 1e-3,
    "train.lr_min": 1e-5,
    "train.schedule": "cosine",
    "train.warmup_steps": 50,
    "train.max_steps": 0,  # 0 = no cap
    "train.seed": 0,
    "train.n_augment": 10,
    "train.n_scans": 5,
    "train.n_views": 6,
    "train.theta_min": 30.0,
    "train.theta_max": 180.0,
    "train.depth_sigma": 1e-3,
    "train.per_view_budget": 1024,
    "train.max_rotation_deg": 15.0,
    # meshing
    "meshing.k": 16,
    "meshing.resolution": 64,
    "meshing.screening": 4.0,
    "meshing.padding": 0.1,
    "meshing.max_iterations": 2000,
    # PCA baseline
    "fit.n_modes": 8,
    "fit.steps": 400,
    "fit.lr": 0.01,
    "fit.n_model_points": 2048,
    "fit.seed": 0,
    # evaluation
    "eval.n_samples": 20_000,
    "eval.seed": 0,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, bool):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{text}' as {type(default).__name__}") from None
    return text


def merge(layers) -> dict[str, object]:
    """Apply ``layers`` (dicts of key -> raw value) over the defaults, in order."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, raw in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key '{key}'")
            cfg[key] = _coerce(key, raw)
    return cfg


def load(path=None, overrides: dict | None = None) -> dict[str, object]:
    layers = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        layers.append(parse_kv(text, path))
    if overrides:
        layers.append(overrides)
    return merge(layers)


def parse_assignments(items) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got '{item}'")
        out[key.strip()] = value.strip()
    return out


def section(cfg: dict, prefix: str) -> dict[str, object]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
