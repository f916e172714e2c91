"""Run configuration.

One nested schema covers every knob of a run: process physics, the material
property box, network/scaling choices, optimizer settings, sampling profile
and batch sizes, evaluation protocol, and output routing.  Every default is
the full-scale reference setting; the desk profile is expressed as an
override set on top of it, and ablation arms are likewise plain override
sets.  Configs are stored as JSON; parse -> serialize -> parse is the
identity, and unknown keys are rejected rather than ignored.
"""
from __future__ import annotations

import copy
import json
import os

import numpy as np

from .model import ARCHITECTURES, SCALING_MODES, ScalingConfig
from .physics import MaterialProps, MaterialSpace, ProcessConfig, resolve_material
from .sampling import BatchSpec
from .train import LossWeights, OptimizerConfig

ENV_OUTPUT_ROOT = "PLATEHEAT_OUT"
PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


DEFAULTS = {
    "process": {
        "extent": [0.040, 0.010, 0.006],
        "laser_power": 500.0,
        "absorptivity": 0.4,
        "beam_radius": 1.5e-3,
        "scan_speed": 0.010,
        "scan_start": [0.005, 0.005, 0.006],
        "t_end": 3.0,
        "t_ambient": 300.0,
        "t_infinity": 300.0,
        "h_conv": 50.0,
        "emissivity": 0.3,
    },
    "material_space": {
        "rho_bounds": [3000.0, 10000.0],
        "cp_bounds": [300.0, 1000.0],
        "k_bounds": [3.0, 50.0],
    },
    "network": {
        "architecture": "decoupled",
        "fusion": "concat",
        "scaling": "physics_guided",
        "kappa": 1.5,
        "epsilon": 1e-3,
        "clip_ceiling": 1e6,
        "fixed_tmax": 3000.0,
    },
    "optimizer": {
        "lr_adam": 2e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_adam": 1e-8,
        "grad_clip": 1e3,
        "adam_epochs": 2000,
        "total_epochs": 10000,
        "curriculum_epochs": 200,
        "lr_lbfgs": 1.0,
        "history": 50,
        "max_inner": 50,
        "wolfe_c1": 1e-4,
        "wolfe_c2": 0.9,
        "curvature_eps": 1e-12,
        "stall_tol": 1e-8,
        "ls_max_evals": 20,
        "ls_fallback_scale": 1e-2,
        "w_pde": 1.0,
        "w_ic": 1e-4,
        "w_bc": 1.0,
    },
    "sampling": {
        "profile": "paper",
        "seed": 0,
        "adam_batch": {"bc": 12000, "ic": 6000, "pde": 20000},
        "lbfgs_batch": {"bc": 8000, "ic": 4000, "pde": 12000},
        "material": None,
        "ablation_seeds": [0, 1, 2, 3, 4],
    },
    "evaluation": {
        "materials": ["Ti-6Al-4V", "Inconel-718", "SS-316L"],
        "probes": [[0.012, 0.005, 0.006], [0.009, 0.005, 0.006]],
        "snapshot_times": [0.5, 1.5, 2.5],
        "oracle_spacing": 5e-4,
    },
    "output": {
        "dir": None,
        "checkpoint_every": 0,
    },
}

# The desk profile shrinks the collocation grids (spacing x2, coarser time
# grid) and compresses the schedule to 200 curriculum + 800 Adam + 500 L-BFGS
# epochs; batch sizes and inner-iteration budget scale down with it so a seed
# stays inside a CPU half-hour.
PROFILE_OVERRIDES = {
    "paper": {},
    "desk": {
        "sampling.profile": "desk",
        "sampling.adam_batch.bc": 3000,
        "sampling.adam_batch.ic": 1000,
        "sampling.adam_batch.pde": 5000,
        "sampling.lbfgs_batch.bc": 2000,
        "sampling.lbfgs_batch.ic": 1000,
        "sampling.lbfgs_batch.pde": 3000,
        "sampling.ablation_seeds": [0, 1, 2],
        "optimizer.adam_epochs": 1000,
        "optimizer.total_epochs": 1500,
        "optimizer.max_inner": 6,
        "optimizer.history": 20,
    },
}

# Leaves that may be null / may change JSON type between null and a value.
_POLYMORPHIC = {("sampling", "material"), ("output", "dir")}


def default_config():
    return copy.deepcopy(DEFAULTS)


def _leaf_type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, (list, tuple))
    return True


def _check_leaf(path, default, value):
    if path in _POLYMORPHIC:
        return
    if not _leaf_type_ok(default, value):
        dotted = ".".join(path)
        raise ConfigError(f"config key {dotted!r} expects a value like "
                          f"{default!r}, got {value!r}")


def _merge(base, user, path=()):
    for key, val in user.items():
        if key not in base:
            dotted = ".".join(path + (key,))
            raise ConfigError(f"unknown config key {dotted!r}")
        cur = base[key]
        if isinstance(cur, dict) and not isinstance(val, dict):
            dotted = ".".join(path + (key,))
            raise ConfigError(f"config key {dotted!r} must be a section")
        if isinstance(cur, dict):
            _merge(cur, val, path + (key,))
        else:
            _check_leaf(path + (key,), cur, val)
            base[key] = val
    return base


def loads(text):
    """Parse a JSON config (possibly partial) over the defaults."""
    try:
        user = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be an object")
    cfg = _merge(default_config(), user)
    validate(cfg)
    return cfg


def load(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return loads(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def dumps(cfg):
    """Canonical serialization; loads(dumps(cfg)) == cfg."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def _walk(cfg, dotted, create_missing=False):
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    return node, keys[-1]


def apply_overrides(cfg, assignments):
    """Apply dotted-key overrides like 'optimizer.lr_adam=1e-3'.  Values parse
    as JSON when possible and fall back to plain strings."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        dotted = dotted.strip()
        node, leaf = _walk(cfg, dotted)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(node[leaf], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {dotted!r} is a section")
        default_node, default_leaf = _walk(DEFAULTS, dotted)
        _check_leaf(tuple(dotted.split(".")), default_node[default_leaf], value)
        node[leaf] = value
    return cfg


def apply_profile(cfg, profile):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    for dotted, value in PROFILE_OVERRIDES[profile].items():
        node, leaf = _walk(cfg, dotted)
        node[leaf] = copy.deepcopy(value)
    return cfg


# ---- validation --------------------------------------------------------------

def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _check_triple(value, dotted):
    _require(isinstance(value, (list, tuple)) and len(value) == 3
             and all(isinstance(v, (int, float)) for v in value),
             f"{dotted} must be a list of three numbers")


def validate(cfg):
    """Structural and cross-field checks; typed constructors run their own
    value validation on top of this."""
    proc = cfg["process"]
    _check_triple(proc["extent"], "process.extent")
    _check_triple(proc["scan_start"], "process.scan_start")
    _require(proc["t_ambient"] == proc["t_infinity"],
             "process.t_ambient must equal process.t_infinity "
             "(a single far-field/initial temperature is assumed)")

    net = cfg["network"]
    _require(net["architecture"] in ARCHITECTURES,
             f"network.architecture must be one of {ARCHITECTURES}")
    _require(net["scaling"] in SCALING_MODES,
             f"network.scaling must be one of {SCALING_MODES}")
    _require(net["fusion"] in ("concat", "film"),
             "network.fusion must be 'concat' or 'film'")

    samp = cfg["sampling"]
    _require(samp["profile"] in PROFILES,
             f"sampling.profile must be one of {PROFILES}")
    _require(isinstance(samp["seed"], int) and samp["seed"] >= 0,
             "sampling.seed must be a non-negative integer")
    for phase in ("adam_batch", "lbfgs_batch"):
        for cat in ("bc", "ic", "pde"):
            v = samp[phase][cat]
            _require(isinstance(v, int) and v > 0,
                     f"sampling.{phase}.{cat} must be a positive integer")
    mat = samp["material"]
    _require(mat is None or isinstance(mat, str)
             or (isinstance(mat, (list, tuple)) and len(mat) == 3),
             "sampling.material must be null, an alloy name, or a "
             "(rho, cp, k) triple")
    _require(net["architecture"] != "npinn" or mat is not None,
             "architecture 'npinn' trains one material per run; set "
             "sampling.material")
    seeds = samp["ablation_seeds"]
    _require(isinstance(seeds, list) and seeds
             and all(isinstance(s, int) and s >= 0 for s in seeds),
             "sampling.ablation_seeds must be a non-empty list of "
             "non-negative integers")

    ev = cfg["evaluation"]
    _require(isinstance(ev["materials"], list) and ev["materials"]
             and all(isinstance(m, str) for m in ev["materials"]),
             "evaluation.materials must be a non-empty list of alloy names")
    _require(isinstance(ev["probes"], list) and ev["probes"],
             "evaluation.probes must be a non-empty list")
    for p in ev["probes"]:
        _check_triple(p, "evaluation.probes entries")
    times = ev["snapshot_times"]
    _require(isinstance(times, list) and times
             and all(isinstance(t, (int, float)) for t in times),
             "evaluation.snapshot_times must be a non-empty list of numbers")
    _require(all(0.0 <= t <= proc["t_end"] for t in times),
             "evaluation.snapshot_times must lie within [0, t_end]")
    _require(ev["oracle_spacing"] > 0,
             "evaluation.oracle_spacing must be positive")

    out = cfg["output"]
    _require(out["dir"] is None or isinstance(out["dir"], str),
             "output.dir must be null or a path string")
    _require(isinstance(out["checkpoint_every"], int)
             and out["checkpoint_every"] >= 0,
             "output.checkpoint_every must be a non-negative integer")

    # let the typed constructors veto bad values early
    try:
        process_config(cfg)
        material_space(cfg)
        scaling_config(cfg)
        optimizer_config(cfg)
        loss_weights(cfg)
        lam = fixed_material(cfg)
        if lam is not None:
            MaterialProps(*(float(v) for v in lam))
        for name in ev["materials"]:
            resolve_material(name)
    except KeyError as exc:
        raise ConfigError(f"unknown material {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# ---- typed views ---------------------------------------------------------------

def process_config(cfg):
    p = cfg["process"]
    return ProcessConfig(extent=tuple(p["extent"]),
                         laser_power=p["laser_power"],
                         absorptivity=p["absorptivity"],
                         beam_radius=p["beam_radius"],
                         scan_speed=p["scan_speed"],
                         scan_start=tuple(p["scan_start"]),
                         t_end=p["t_end"],
                         t_ambient=p["t_ambient"],
                         t_infinity=p["t_infinity"],
                         h_conv=p["h_conv"],
                         emissivity=p["emissivity"])


def material_space(cfg):
    m = cfg["material_space"]
    return MaterialSpace(rho_bounds=tuple(m["rho_bounds"]),
                         cp_bounds=tuple(m["cp_bounds"]),
                         k_bounds=tuple(m["k_bounds"]))


def scaling_config(cfg):
    n = cfg["network"]
    return ScalingConfig(mode=n["scaling"], kappa=n["kappa"],
                         epsilon=n["epsilon"], clip_ceiling=n["clip_ceiling"],
                         fixed_tmax=n["fixed_tmax"])


def optimizer_config(cfg):
    fields = {k: v for k, v in cfg["optimizer"].items()
              if k not in ("w_pde", "w_ic", "w_bc")}
    return OptimizerConfig(**fields)


def loss_weights(cfg):
    o = cfg["optimizer"]
    return LossWeights(w_pde=o["w_pde"], w_ic=o["w_ic"], w_bc=o["w_bc"])


def fixed_material(cfg):
    """Resolve sampling.material to a (rho, cp, k) array, or None when the
    run trains across the whole material box."""
    mat = cfg["sampling"]["material"]
    if mat is None:
        return None
    if isinstance(mat, str):
        return resolve_material(mat).as_array()
    return np.asarray(mat, dtype=np.float64)


def batch_specs(cfg):
    policy = "fixed" if cfg["sampling"]["material"] is not None else "per_point"
    a = cfg["sampling"]["adam_batch"]
    l = cfg["sampling"]["lbfgs_batch"]
    return (BatchSpec(bc=a["bc"], ic=a["ic"], pde=a["pde"], lam_policy=policy),
            BatchSpec(bc=l["bc"], ic=l["ic"], pde=l["pde"], lam_policy=policy))


# ---- output routing and manifest ----------------------------------------------

def resolve_output_dir(cfg, cli_out=None, default_name="run"):
    """Precedence: --out flag, then output.dir, then the output-root
    environment variable, then ./runs; the last two get a subdirectory named
    after the command so repeat runs land in a predictable place."""
    if cli_out:
        return cli_out
    if cfg["output"]["dir"]:
        return cfg["output"]["dir"]
    root = os.environ.get(ENV_OUTPUT_ROOT, "runs")
    return os.path.join(root, default_name)


def write_manifest(cfg, path):
    """The manifest is the resolved config, canonically serialized; identical
    manifests imply identical run inputs."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(cfg))


def manifest_name(out_dir):
    return os.path.join(out_dir, "manifest.json")
