"""Experiment configuration: JSON documents validated against a bundled schema."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "seed": 0,
    "output_dir": "runs/experiment",
    "init_from": None,
    "model": {
        "prototypes": ["P1", "P2", "P3"],
        "dt": 1.0,
        "h": 0.01,
        "noise_amplitude": 0.0,
        "noise_sigma": 1.0,
        "f_init": 0.1,
        "f_pinned": None,
        "feed_convention": "initialized",
        "recompute_segments": False,
    },
    "generator": {
        "n_bits": 16,
        "base_width": 32,
        "min_width": 8,
        "blur_sigma": 1.0,
        "max_concentration": 10.0,
        "init_max": 1.0,
    },
    "encoder": None,
    "loss": {"overrides": {}, "target": None},
    "optimizer": {
        "lr": 1e-3,
        "beta1": 0.95,
        "beta2": 0.999,
        "eps": 1e-8,
        "clip_norm": 0.5,
        "decrease_at": [],
        "lr_patience": 500,
        "es_patience": 1000,
        "max_iterations": 1000,
        "batch_size": 1,
        "checkpoint_every": 500,
    },
    "render_every": 0,
}

ENCODER_DEFAULTS = {"n_blocks": 3, "base_width": 32, "max_width": 64}


class ConfigError(ValueError):
    """Configuration rejected; ``problems`` lists every diagnostic."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


def schema() -> dict[str, Any]:
    text = resources.files("dense_rdn").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: Mapping[str, Any], base_dir: Path | None = None) -> dict[str, Any]:
    """Validate ``raw`` against the schema, fill defaults and check cross-field rules."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors])
    cfg = _merge(DEFAULTS, raw)
    if cfg.get("encoder") is not None:
        cfg["encoder"] = _merge(ENCODER_DEFAULTS, cfg["encoder"])
    problems = semantic_problems(cfg)
    if problems:
        raise ConfigError(problems)
    target = cfg["loss"].get("target")
    if target and "png" in target and base_dir is not None:
        p = Path(target["png"])
        if not p.is_absolute():
            target["png"] = str((base_dir / p).resolve())
    if cfg.get("init_from") and base_dir is not None and not Path(cfg["init_from"]).is_absolute():
        cfg["init_from"] = str((base_dir / cfg["init_from"]).resolve())
    return cfg


def semantic_problems(cfg: Mapping[str, Any]) -> list[str]:
    from dense_rdn.losses import preset

    problems = []
    m = cfg["model"]
    u, v = m["grid"]
    g = cfg["generator"]
    n_blocks = g.get("n_blocks")
    seed = g.get("seed_shape", [1, 1])
    if n_blocks is not None and (seed[0] * 2**n_blocks, seed[1] * 2**n_blocks) != (u, v):
        problems.append(f"generator: seed {seed} with {n_blocks} blocks gives {[s * 2**n_blocks for s in seed]}, grid is {[u, v]}")
    try:
        lc = preset(cfg["loss"]["preset"], **cfg["loss"].get("overrides", {}))
    except (TypeError, ValueError) as exc:
        return problems + [f"loss: {exc}"]
    target = cfg["loss"].get("target")
    if "target" in lc.enabled:
        if not target or not ("builtin" in target or "png" in target):
            problems.append(f"loss: preset {cfg['loss']['preset']!r} needs a target image (loss.target.png or .builtin)")
        if lc.target_species >= m["n_species"]:
            problems.append("loss: target_species out of range")
    if target and "builtin" in target and "png" in target:
        problems.append("loss.target: give either png or builtin, not both")
    if "z_reconstruction" in lc.enabled and cfg.get("encoder") is None:
        problems.append("loss: z reconstruction needs an encoder section")
    if lc.shift is not None and not 0 < lc.shift < u:
        problems.append(f"loss: shift {lc.shift} must satisfy 0 < w < {u}")
    if m.get("recompute_segments") and lc.needs_dense_trajectory:
        problems.append("model: recompute_segments only supports replication/variance/step-penalty losses")
    if "P3" not in m["prototypes"]:
        problems.append("model: initialization needs prototype P3")
    if "P1" in m["prototypes"] and m["n_species"] < 3:
        problems.append("model: prototype P1 needs at least 3 species")
    return problems


def load(path) -> dict[str, Any]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return resolve(raw, base_dir=path.parent)


def preset_path(name: str) -> Path:
    p = resources.files("dense_rdn").joinpath(f"presets/{name}.json")
    return Path(str(p))


def list_presets() -> list[str]:
    d = resources.files("dense_rdn").joinpath("presets")
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".json"))


def dump(cfg: Mapping[str, Any], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
