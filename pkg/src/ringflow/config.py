"""Sectioned key=value experiment configuration.

One plain-text document addresses every tunable in the package:

    [ring]        geometry, car-following constants, MDP shape
    [lane_change] ring perturbation rates
    [train]       optimizer constants
    [curriculum]  stage schedule switches
    [highway]     transfer-target geometry and protocol
    [run]         seeds and output locations

The car-following parameters live in [ring] and are shared with the
highway (one vehicle model everywhere). Parsing is strict: unknown
sections or keys, duplicates, and type errors fail with file:line
diagnostics. parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from . import __version__
from .dynamics import IdmParams
from .highway_env import HighwayConfig, LaneChangeModel
from .perturbation import LaneChangeConfig
from .ring_env import RingEnvConfig
from .trpo import TrainConfig


class ConfigError(ValueError):
    """Parse or validation failure; str(err) is a one-line diagnostic."""


# kind is one of int, float, bool, str, float_or_auto ("auto" -> None)
_SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "ring": {
        "n_av": ("int", "1"),
        "vehicles_per_av": ("int", "22"),
        "length_min": ("float_or_auto", "auto"),
        "length_max": ("float_or_auto", "auto"),
        "dt": ("float", "0.2"),
        "horizon_steps": ("int", "3000"),
        "warmup_steps": ("int", "0"),
        "obs_frames": ("int", "5"),
        "obs_sample_period": ("float", "2.0"),
        "action_lo": ("float", "-3.0"),
        "action_hi": ("float", "1.3"),
        "c1": ("float", "0.005"),
        "c2": ("float", "0.1"),
        "collision_penalty": ("float", "100.0"),
        "vehicle_length": ("float", "5.0"),
        "v0": ("float", "30.0"),
        "T": ("float", "1.0"),
        "a": ("float", "1.3"),
        "b": ("float", "2.0"),
        "delta": ("float", "4.0"),
        "s0": ("float", "2.0"),
        "noise_std": ("float", "0.3"),
    },
    "lane_change": {
        "enabled": ("bool", "false"),
        "e_in": ("float", "0.0"),
        "e_out": ("float", "0.0"),
        "min_insert_gap": ("float", "14.0"),
    },
    "train": {
        "gamma": ("float", "0.99"),
        "kl_step": ("float", "0.01"),
        "cg_iters": ("int", "10"),
        "cg_damping": ("float", "0.1"),
        "backtrack_ratio": ("float", "0.8"),
        "max_backtracks": ("int", "15"),
        "batch_env_steps": ("int", "20000"),
        "gae_lambda": ("float", "0.95"),
        "value_epochs": ("int", "25"),
        "value_lr": ("float", "0.001"),
        "eval_every": ("int", "10"),
        "eval_episodes": ("int", "2"),
    },
    "curriculum": {
        "enabled": ("bool", "true"),
        "n_pretrain": ("int", "200"),
        "n_train": ("int", "500"),
    },
    "highway": {
        "lanes": ("int", "2"),
        "segment_length": ("float", "1600.0"),
        "inflow_rate": ("float", "1900.0"),
        "dt": ("float", "0.4"),
        "warmup_duration": ("float", "3600.0"),
        "eval_duration": ("float", "600.0"),
        "penetration": ("float", "0.05"),
        "x_on": ("float", "400.0"),
        "x_off": ("float", "1200.0"),
        "bottleneck_position": ("float", "1200.0"),
        "bottleneck_speed": ("float", "2.0"),
        "politeness": ("float", "0.3"),
        "incentive_threshold": ("float", "0.2"),
        "safe_braking": ("float", "4.0"),
        "v_stop": ("float", "0.3"),
    },
    "run": {
        "id": ("str", "experiment"),
        "seed": ("int", "0"),
        "n_seeds": ("int", "1"),
        "out_dir": ("str", "runs"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully materialized configuration for one experiment."""

    ring_env: RingEnvConfig
    train: TrainConfig
    curriculum_enabled: bool
    n_pretrain: int
    n_train: int
    highway: HighwayConfig
    run_id: str
    seed: int
    n_seeds: int
    out_dir: str


def _convert(kind: str, text: str, where: str):
    if kind == "str":
        return text
    if kind == "bool":
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{where}: expected true or false, got {text!r}")
    if kind == "float_or_auto" and text.lower() == "auto":
        return None
    try:
        if kind == "int":
            return int(text)
        return float(text)  # float and float_or_auto
    except ValueError:
        raise ConfigError(
            f"{where}: expected {kind.replace('_or_auto', '')}, "
            f"got {text!r}") from None


def _parse_raw(text: str, source: str) -> dict[str, dict[str, tuple[str, str]]]:
    """Strict sectioned key=value scan; values stay strings, each tagged
    with its '{source}:{line}' location for later diagnostics."""
    raw: dict[str, dict[str, tuple[str, str]]] = {}
    section: str | None = None
    seen_sections: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or \
                stripped.startswith(";"):
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigError(f"{where}: unknown section '[{name}]'")
            if name in seen_sections:
                raise ConfigError(f"{where}: duplicate section '[{name}]'")
            seen_sections.add(name)
            section = name
            raw[name] = {}
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value' or "
                              f"'[section]', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(
                f"{where}: unknown key '{key}' in section [{section}]")
        if key in raw[section]:
            raise ConfigError(
                f"{where}: duplicate key '{key}' in section [{section}]")
        raw[section][key] = (value, where)
    return raw


def apply_overrides(raw, overrides) -> None:
    """Apply 'section.key=value' strings on top of parsed text."""
    for item in overrides:
        where = f"override {item!r}"
        head, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"{where}: expected section.key=value")
        section, dot, key = head.strip().partition(".")
        key = key.strip()
        if not dot or section not in _SCHEMA:
            raise ConfigError(f"{where}: unknown section {section!r}")
        if key not in _SCHEMA[section]:
            raise ConfigError(
                f"{where}: unknown key '{key}' in section [{section}]")
        raw.setdefault(section, {})[key] = (value.strip(), where)


def _materialize(raw) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            text, where = raw.get(section, {}).get(
                key, (default, f"default for {section}.{key}"))
            values[section][key] = _convert(kind, text, where)
    r = values["ring"]
    lo, hi = r["length_min"], r["length_max"]
    if (lo is None) != (hi is None):
        raise ConfigError(
            "ring.length_min and ring.length_max must both be 'auto' "
            "or both numeric")
    idm = IdmParams(v0=r["v0"], T=r["T"], a=r["a"], b=r["b"],
                    delta=r["delta"], s0=r["s0"],
                    noise_std=r["noise_std"])
    lc = values["lane_change"]
    lane_change = LaneChangeConfig(
        e_in=lc["e_in"], e_out=lc["e_out"],
        min_insert_gap=lc["min_insert_gap"], enabled=lc["enabled"])
    try:
        ring_env = RingEnvConfig(
            n_av=r["n_av"], vehicles_per_av=r["vehicles_per_av"],
            length_range=None if lo is None else (lo, hi),
            dt=r["dt"], horizon_steps=r["horizon_steps"],
            obs_frames=r["obs_frames"],
            obs_sample_period=r["obs_sample_period"],
            action_bounds=(r["action_lo"], r["action_hi"]),
            c1=r["c1"], c2=r["c2"], idm=idm,
            vehicle_length=r["vehicle_length"],
            warmup_steps=r["warmup_steps"], lane_change=lane_change,
            collision_penalty=r["collision_penalty"])
        t = values["train"]
        train = TrainConfig(
            gamma=t["gamma"], kl_step=t["kl_step"],
            cg_iters=t["cg_iters"], cg_damping=t["cg_damping"],
            backtrack_ratio=t["backtrack_ratio"],
            max_backtracks=t["max_backtracks"],
            batch_env_steps=t["batch_env_steps"],
            gae_lambda=t["gae_lambda"], value_epochs=t["value_epochs"],
            value_lr=t["value_lr"], eval_every=t["eval_every"],
            eval_episodes=t["eval_episodes"])
        h = values["highway"]
        highway = HighwayConfig(
            lanes=h["lanes"], segment_length=h["segment_length"],
            inflow_rate=h["inflow_rate"], dt=h["dt"],
            warmup_duration=h["warmup_duration"],
            eval_duration=h["eval_duration"],
            penetration=h["penetration"],
            control_region=(h["x_on"], h["x_off"]),
            bottleneck_position=h["bottleneck_position"],
            bottleneck_speed=h["bottleneck_speed"],
            lc_model=LaneChangeModel(
                politeness=h["politeness"],
                incentive_threshold=h["incentive_threshold"],
                safe_braking=h["safe_braking"]),
            v_stop=h["v_stop"], idm=idm,
            vehicle_length=r["vehicle_length"],
            obs_frames=r["obs_frames"],
            obs_sample_period=r["obs_sample_period"],
            action_bounds=(r["action_lo"], r["action_hi"]))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc
    c = values["curriculum"]
    u = values["run"]
    if u["n_seeds"] < 1:
        raise ConfigError("run.n_seeds must be >= 1")
    return ExperimentConfig(
        ring_env=ring_env, train=train,
        curriculum_enabled=c["enabled"],
        n_pretrain=c["n_pretrain"], n_train=c["n_train"],
        highway=highway, run_id=u["id"], seed=u["seed"],
        n_seeds=u["n_seeds"], out_dir=u["out_dir"])


def parse_config_text(text: str, source: str = "<config>",
                      overrides=()) -> ExperimentConfig:
    raw = _parse_raw(text, source)
    apply_overrides(raw, overrides)
    return _materialize(raw)


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path), overrides=overrides)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical full rendering: every key explicit, schema order."""
    ring = cfg.ring_env
    idm = ring.idm
    lc = ring.lane_change
    hw = cfg.highway
    t = cfg.train
    lr = ring.length_range
    vals = {
        "ring": {
            "n_av": ring.n_av, "vehicles_per_av": ring.vehicles_per_av,
            "length_min": None if lr is None else lr[0],
            "length_max": None if lr is None else lr[1],
            "dt": ring.dt, "horizon_steps": ring.horizon_steps,
            "warmup_steps": ring.warmup_steps,
            "obs_frames": ring.obs_frames,
            "obs_sample_period": ring.obs_sample_period,
            "action_lo": ring.action_bounds[0],
            "action_hi": ring.action_bounds[1],
            "c1": ring.c1, "c2": ring.c2,
            "collision_penalty": ring.collision_penalty,
            "vehicle_length": ring.vehicle_length,
            "v0": idm.v0, "T": idm.T, "a": idm.a, "b": idm.b,
            "delta": idm.delta, "s0": idm.s0,
            "noise_std": idm.noise_std,
        },
        "lane_change": {
            "enabled": lc.enabled, "e_in": lc.e_in, "e_out": lc.e_out,
            "min_insert_gap": lc.min_insert_gap,
        },
        "train": {
            "gamma": t.gamma, "kl_step": t.kl_step,
            "cg_iters": t.cg_iters, "cg_damping": t.cg_damping,
            "backtrack_ratio": t.backtrack_ratio,
            "max_backtracks": t.max_backtracks,
            "batch_env_steps": t.batch_env_steps,
            "gae_lambda": t.gae_lambda,
            "value_epochs": t.value_epochs, "value_lr": t.value_lr,
            "eval_every": t.eval_every,
            "eval_episodes": t.eval_episodes,
        },
        "curriculum": {
            "enabled": cfg.curriculum_enabled,
            "n_pretrain": cfg.n_pretrain, "n_train": cfg.n_train,
        },
        "highway": {
            "lanes": hw.lanes, "segment_length": hw.segment_length,
            "inflow_rate": hw.inflow_rate, "dt": hw.dt,
            "warmup_duration": hw.warmup_duration,
            "eval_duration": hw.eval_duration,
            "penetration": hw.penetration,
            "x_on": hw.control_region[0],
            "x_off": hw.control_region[1],
            "bottleneck_position": hw.bottleneck_position,
            "bottleneck_speed": hw.bottleneck_speed,
            "politeness": hw.lc_model.politeness,
            "incentive_threshold": hw.lc_model.incentive_threshold,
            "safe_braking": hw.lc_model.safe_braking,
            "v_stop": hw.v_stop,
        },
        "run": {
            "id": cfg.run_id, "seed": cfg.seed,
            "n_seeds": cfg.n_seeds, "out_dir": cfg.out_dir,
        },
    }
    lines = []
    for section in _SCHEMA:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            lines.append(f"{key} = {_fmt(vals[section][key])}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def version_hash() -> str:
    """Content hash of the version string, git blob style."""
    body = f"ringflow-{__version__}".encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Written before any compute; never rewritten afterwards."""

    experiment_id: str
    config_hash: str
    version: str
    version_hash: str
    seeds: tuple[int, ...]
    outputs: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps({
            "experiment_id": self.experiment_id,
            "config_hash": self.config_hash,
            "version": self.version,
            "version_hash": self.version_hash,
            "seeds": list(self.seeds),
            "outputs": list(self.outputs),
        }, indent=2, sort_keys=True) + "\n"


def write_manifest(path, manifest: RunManifest) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(manifest.to_json())
