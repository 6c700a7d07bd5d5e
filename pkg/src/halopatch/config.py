"""Experiment configuration: plain-text key-value tree, schema-checked.

Config files are INI-style sections of key = value pairs (see SCHEMA).
Seeds are mandatory; nothing draws implicit entropy. Every results file
echoes the parsed config verbatim plus content hashes of its inputs, so
identical inputs reproduce byte-identical outputs.
"""

import configparser
import hashlib
import json
import os

from .bench import SolverConfig, SurrogateHostConfig
from .correctors import TrainConfig
from .fields import make_partition


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


class DependencyError(RuntimeError):
    """A required upstream artifact (dataset, checkpoint) is missing."""


# section -> key -> (parser, default); REQUIRED means no default
REQUIRED = object()

def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip() != "")

def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip() != "")

def _bool(s):
    if s.lower() in ("1", "true", "on", "yes"):
        return True
    if s.lower() in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


SCHEMA = {
    "experiment": {
        "name": (str, "experiment"),
        "seed": (int, REQUIRED),
    },
    "solver": {
        "grid": (int, 64),
        "nu": (float, 1e-3),
        "dt": (float, 0.01),
        "family": (str, "shear"),
        "substeps_per_frame": (int, 5),
        "forcing_amplitude": (float, 0.0),
    },
    "data": {
        "n_traj": (int, 20),
        "n_frames": (int, 21),
        "train_n": (int, 16),
        "test_indices": (_ints, (16, 17, 18, 19)),
    },
    "host": {
        "mode_cutoff": (float, 0.6),
        "bias_scale": (float, 0.05),
        "noise_scale": (float, 0.02),
    },
    "partition": {
        "block": (int, 8),
        "halo": (int, 4),
    },
    "global": {
        "width": (int, 16),
        "n_spectral": (int, 2),
        "modes": (int, 8),
        "epochs": (int, 24),
        "ar_depth": (int, 5),
        "t0_pool": (_ints, (3, 5, 7, 10)),
        "lr": (float, 8e-4),
        "weight_decay": (float, 1e-4),
        "patience": (int, 8),
    },
    "local": {
        "width": (int, 24),
        "depth": (int, 3),
        "patch_steps": (int, 200),
        "patch_lr": (float, 5e-4),
        "patch_weight_mode": (str, "uniform"),
        "patch_t0_pool": (_ints, (3, 5, 7, 10, 13)),
        "patch_patience": (int, 10),
        "ar_epochs": (int, 9),
        "ar_lr": (float, 1e-4),
        "ar_weight_decay": (float, 1e-4),
        "ar_t0_pool": (_ints, (3, 5, 7, 10)),
        "ar_depth": (int, 5),
        "aux_weight": (float, 1e-4),
        "patience": (int, 6),
        "curriculum": (_floats, (0.25, 0.5)),
    },
    "evaluate": {
        "horizon": (int, 10),
        "t0_pool": (_ints, (5, 10)),
        "policy": (str, "innovation_keg"),
        "budget_fraction": (float, 1.0),
        "lambda_ke": (float, 0.05),
        "hann": (_bool, True),
        "n_boot": (int, 2000),
    },
    "sweep": {
        "budget_grid": (_floats, tuple(round(0.1 * i, 1) for i in range(11))),
        "lambda_grid": (_floats, (0.0, 0.025, 0.05, 0.1, 0.2)),
        "data_sizes": (_ints, (6, 10, 16)),
    },
}


def parse_config(path, seed_override=None):
    """Parse and validate a config file into a nested plain dict."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp.read(path)
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    out = {}
    for section, keys in SCHEMA.items():
        out[section] = {}
        for key, (parse, default) in keys.items():
            if cp.has_option(section, key):
                try:
                    out[section][key] = parse(cp.get(section, key))
                except ValueError as exc:
                    raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
            elif default is REQUIRED:
                raise ConfigError(f"missing required key [{section}] {key} (seeds are mandatory)")
            else:
                out[section][key] = default
    if seed_override is not None:
        out["experiment"]["seed"] = int(seed_override)
    _validate(out)
    return out


def _validate(cfg):
    data = cfg["data"]
    if data["train_n"] > data["n_traj"]:
        raise ConfigError("train_n exceeds n_traj")
    bad = [i for i in data["test_indices"] if not 0 <= i < data["n_traj"]]
    if bad:
        raise ConfigError(f"test indices out of range: {bad}")
    overlap = [i for i in data["test_indices"] if i < data["train_n"]]
    if overlap:
        raise ConfigError(f"test indices overlap the training range: {overlap}")
    grid = cfg["solver"]["grid"]
    b, h = cfg["partition"]["block"], cfg["partition"]["halo"]
    if grid % b:
        raise ConfigError(f"block {b} does not divide grid {grid}")
    if not 0 < h < b:
        raise ConfigError(f"degenerate halo geometry: h={h}, b={b}")
    if cfg["evaluate"]["policy"] not in (
        "innovation_keg", "spectral_hf", "wavelet_hf", "random", "oracle", "static"
    ):
        raise ConfigError(f"unknown policy {cfg['evaluate']['policy']!r}")
    horizon = cfg["evaluate"]["horizon"]
    t0_max = max(cfg["evaluate"]["t0_pool"])
    if t0_max + horizon + 1 > data["n_frames"]:
        raise ConfigError(
            f"n_frames={data['n_frames']} too short for t0={t0_max} + horizon={horizon}"
        )


def solver_config(cfg):
    s = cfg["solver"]
    return SolverConfig(
        H=s["grid"], W=s["grid"], nu=s["nu"], dt=s["dt"], family=s["family"],
        seed=cfg["experiment"]["seed"], substeps_per_frame=s["substeps_per_frame"],
        forcing_amplitude=s["forcing_amplitude"],
    )


def host_config(cfg):
    h = cfg["host"]
    return SurrogateHostConfig(
        mode_cutoff=h["mode_cutoff"], bias_scale=h["bias_scale"],
        noise_scale=h["noise_scale"], seed=cfg["experiment"]["seed"],
    )


def partition(cfg):
    grid = cfg["solver"]["grid"]
    return make_partition(grid, grid, cfg["partition"]["block"], cfg["partition"]["halo"])


def global_train_config(cfg):
    g = cfg["global"]
    return TrainConfig(
        ar_depth=g["ar_depth"], t0_pool=g["t0_pool"], epochs=g["epochs"],
        lr=g["lr"], weight_decay=g["weight_decay"], patience=g["patience"],
        seed=cfg["experiment"]["seed"],
    )


def patch_train_config(cfg):
    lo = cfg["local"]
    return TrainConfig(
        steps=lo["patch_steps"], t0_pool=lo["patch_t0_pool"], lr=lo["patch_lr"],
        patch_weight_mode=lo["patch_weight_mode"], patience=lo["patch_patience"],
        seed=cfg["experiment"]["seed"],
    )


def ar_train_config(cfg):
    lo = cfg["local"]
    return TrainConfig(
        ar_depth=lo["ar_depth"], t0_pool=lo["ar_t0_pool"], epochs=lo["ar_epochs"],
        lr=lo["ar_lr"], weight_decay=lo["ar_weight_decay"],
        aux_weight=lo["aux_weight"], patience=lo["patience"],
        curriculum=lo["curriculum"], seed=cfg["experiment"]["seed"],
    )


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_results(path, obj):
    """Deterministic structured-text results file (sorted-key JSON)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")
