"""Run configuration: presets, strict validation and object builders.

A run configuration is a nested JSON object.  Values are resolved as
preset < config file < command-line flags, and every key is checked against
the preset schema before any computation starts; unknown keys are errors.

Each section has its own ``seed``; the seed actually used is derived from
``(root seed, section name, section seed)`` so a single ``--seed`` flag
moves every random stream of a run at once.
"""

from __future__ import annotations

import copy
import hashlib
import json

from curvlink import data, nn, rng, train
from curvlink.curvature import CurvParams
from curvlink.errors import ConfigurationError

DESK = {
    "run_id": None,
    "output_dir": "runs",
    "seed": 0,
    "data": {
        "n_classes": 3,
        "dim": 16,
        "head_per_class": 597,
        "tail_sizes": [2, 5, 9, 12, 16, 19, 23, 26, 30, 33, 37, 40],
        "tail_offset": 5.0,
        "mislabel_fraction": 0.05,
        "cluster_std": 1.0,
        "class_sep": 5.0,
        "tail_std_factor": 1.0,
        "n_duplicate_pairs": 5,
        "seed": 1,
        "n_holdout": 2000,
        "bayes_mc": 100000,
    },
    "model": {
        "hidden": [64, 64],
        "activation": "tanh",
        "loss": "cross_entropy",
        "loss_bound": None,
    },
    "train": {
        "epochs": 45,
        "batch_size": 32,
        "lr": 1.0,
        "lr_drop_epochs": [27, 36],
        "lr_drop_factor": 0.1,
        "seed": 3,
    },
    "dp_train": {
        "epochs": 40,
        "batch_size": 128,
        "lr": 4.0,
        "lr_drop_epochs": [24, 32],
        "lr_drop_factor": 0.1,
        "seed": 5,
        "clip_norm": 1.0,
        "delta": 1e-5,
        "noise_multiplier": None,
    },
    "dp_sweep": {
        "epochs": 300,
        "batch_size": 512,
        "lr": 1.0,
        "lr_drop_epochs": [180, 240],
        "lr_drop_factor": 0.1,
        "seed": 9,
        "n_seeds": 5,
    },
    "curvature": {"h": 1e-3, "n": 10, "seed": 0, "mode": "normalized"},
    "experiment": {
        "K": 200,
        "ratio": 0.7,
        "mask_seed": 7,
        "n_bins": 50,
        "top_k": 32,
        "eps_grid": [0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
        "seeds_per_eps": 20,
        "dp_mask_seed": 11,
        "n_probes": 16,
        "rho_pairs": 200,
        "alpha_mode": "gaussian",
        "alpha_sigma": None,
        "upsilon": None,
        "alpha_mc": 10000,
    },
}


def _paper_cifar():
    cfg = copy.deepcopy(DESK)
    sched = {"epochs": 20, "batch_size": 128, "lr": 0.001, "lr_drop_epochs": [12, 16], "lr_drop_factor": 0.1}
    cfg["train"].update(sched)
    cfg["dp_train"].update(sched)
    cfg["dp_sweep"].update(sched)
    return cfg


def _tiny():
    """Seconds-scale configuration for smoke and determinism runs."""
    cfg = copy.deepcopy(DESK)
    cfg["data"].update({"head_per_class": 40, "tail_sizes": [2, 4, 6, 8], "n_duplicate_pairs": 2,
                        "n_holdout": 200, "bayes_mc": 10000})
    cfg["model"]["hidden"] = [16]
    cfg["train"].update({"epochs": 6, "lr_drop_epochs": [4, 5]})
    cfg["dp_train"].update({"epochs": 4, "batch_size": 32, "lr_drop_epochs": [2, 3]})
    cfg["dp_sweep"].update({"epochs": 12, "batch_size": 64, "lr_drop_epochs": [8, 10], "n_seeds": 2})
    cfg["experiment"].update({"K": 6, "top_k": 6, "eps_grid": [1.0, 4.0, 16.0, 32.0], "seeds_per_eps": 3,
                              "n_probes": 4, "rho_pairs": 10, "alpha_mc": 10000, "n_bins": 10})
    return cfg


PRESETS = {"desk": DESK, "paper-cifar": _paper_cifar(), "tiny": _tiny()}

# keys whose value may be null in a preset and a number/list in a config
_NULLABLE = {("run_id",), ("model", "loss_bound"), ("dp_train", "noise_multiplier"),
             ("experiment", "alpha_sigma"), ("experiment", "upsilon")}


def preset(name):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def merge(base, override, path=()):
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are errors."""
    if not isinstance(override, dict):
        raise ConfigurationError(f"{'.'.join(path) or 'config'} must be an object")
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = path + (key,)
        if key not in base:
            raise ConfigurationError(f"unknown config key {'.'.join(where)!r}")
        if isinstance(base[key], dict):
            out[key] = merge(base[key], val, where)
        else:
            _check_type(base[key], val, where)
            out[key] = copy.deepcopy(val)
    return out


def _check_type(ref, val, where):
    name = ".".join(where)
    if val is None:
        if ref is None or where in _NULLABLE:
            return
        raise ConfigurationError(f"{name} may not be null")
    if ref is None:
        return
    if isinstance(ref, bool):
        ok = isinstance(val, bool)
    elif isinstance(ref, (int, float)):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    elif isinstance(ref, str):
        ok = isinstance(val, str)
    elif isinstance(ref, list):
        ok = isinstance(val, list)
    else:
        ok = True
    if not ok:
        raise ConfigurationError(f"{name}: expected {type(ref).__name__}, got {type(val).__name__}")


def resolve(preset_name="desk", file_cfg=None, overrides=None):
    cfg = preset(preset_name)
    if file_cfg:
        cfg = merge(cfg, file_cfg)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg):
    """Build every object once so invalid values fail before any compute."""
    genspec(cfg)
    model_spec(cfg)
    train_config(cfg)
    train_config(cfg, dp=True, eps=1.0)
    curv_params(cfg)
    ex = cfg["experiment"]
    if ex["K"] < 2:
        raise ConfigurationError("experiment.K must be >= 2")
    if not 0 < ex["ratio"] < 1:
        raise ConfigurationError("experiment.ratio must lie in (0, 1)")
    if ex["n_bins"] < 2:
        raise ConfigurationError("experiment.n_bins must be >= 2")
    if not ex["eps_grid"] or any(not e > 0 for e in ex["eps_grid"]):
        raise ConfigurationError("experiment.eps_grid must hold positive values")
    sweep_config(cfg)
    if cfg["dp_sweep"]["n_seeds"] < 2:
        raise ConfigurationError("dp_sweep.n_seeds must be >= 2")
    if ex["top_k"] < 1 or ex["top_k"] >= genspec(cfg).n_samples:
        raise ConfigurationError("experiment.top_k out of range")
    if ex["seeds_per_eps"] < 2:
        raise ConfigurationError("experiment.seeds_per_eps must be >= 2")
    if ex["alpha_mode"] not in ("gaussian", "ball_uniform"):
        raise ConfigurationError("experiment.alpha_mode must be gaussian or ball_uniform")
    if ex["alpha_mode"] == "ball_uniform" and not (ex["upsilon"] or 0) > 0:
        raise ConfigurationError("ball_uniform adjacency needs experiment.upsilon > 0")
    return cfg


# where a run is written does not change what it computes
_LOCATION_KEYS = ("run_id", "output_dir")


def digest(cfg):
    """sha256 of the canonical JSON config, ignoring the output location."""
    body = {k: v for k, v in cfg.items() if k not in _LOCATION_KEYS}
    blob = json.dumps(body, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def seed_for(cfg, section, sub=None):
    local = cfg[section]["seed"] if sub is None else cfg[section][sub]
    return rng.derive_seed(int(cfg["seed"]), section if sub is None else f"{section}.{sub}", int(local))


def genspec(cfg):
    d = cfg["data"]
    k = int(d["n_classes"])
    tails = [data.TailSpec(cls=j % k, size=int(s), offset_scale=float(d["tail_offset"]))
             for j, s in enumerate(d["tail_sizes"])]
    return data.GenSpec(n_classes=k, dim=int(d["dim"]), head_per_class=int(d["head_per_class"]),
                        tail_subpops=tuple(tails), mislabel_fraction=float(d["mislabel_fraction"]),
                        cluster_std=float(d["cluster_std"]), seed=seed_for(cfg, "data"),
                        class_sep=float(d["class_sep"]), tail_std_factor=float(d["tail_std_factor"]),
                        n_duplicate_pairs=int(d["n_duplicate_pairs"]))


def model_spec(cfg):
    mdl = cfg["model"]
    d = cfg["data"]
    dims = (int(d["dim"]),) + tuple(int(h) for h in mdl["hidden"]) + (int(d["n_classes"]),)
    return nn.ModelSpec(dims, mdl["activation"], mdl["loss"], mdl["loss_bound"])


def train_config(cfg, dp=False, eps=None):
    sec = cfg["dp_train" if dp else "train"]
    dp_cfg = None
    if dp:
        if sec["noise_multiplier"] is not None:
            dp_cfg = train.DpConfig(clip_norm=float(sec["clip_norm"]),
                                    noise_multiplier=float(sec["noise_multiplier"]),
                                    delta=float(sec["delta"]))
        else:
            dp_cfg = train.DpConfig(clip_norm=float(sec["clip_norm"]),
                                    target_epsilon=float(eps if eps is not None else 1.0),
                                    delta=float(sec["delta"]))
    return train.TrainConfig(epochs=int(sec["epochs"]), batch_size=int(sec["batch_size"]),
                             lr=float(sec["lr"]), lr_drop_epochs=tuple(sec["lr_drop_epochs"]),
                             lr_drop_factor=float(sec["lr_drop_factor"]),
                             seed=seed_for(cfg, "dp_train" if dp else "train"), dp=dp_cfg)


def sweep_config(cfg, sigma=None, max_steps=None):
    """Training config of the budget-truncated curvature sweep.

    Without ``sigma`` the DP part targets ``max(eps_grid)`` (the input of
    :func:`curvlink.train.budget_truncation`); with it, the noise is fixed
    and ``max_steps`` caps the run.
    """
    sec, dps = cfg["dp_sweep"], cfg["dp_train"]
    if sigma is None:
        dp_cfg = train.DpConfig(clip_norm=float(dps["clip_norm"]), delta=float(dps["delta"]),
                                target_epsilon=float(max(cfg["experiment"]["eps_grid"])))
    else:
        dp_cfg = train.DpConfig(clip_norm=float(dps["clip_norm"]), delta=float(dps["delta"]),
                                noise_multiplier=float(sigma))
    return train.TrainConfig(epochs=int(sec["epochs"]), batch_size=int(sec["batch_size"]), lr=float(sec["lr"]),
                             lr_drop_epochs=tuple(sec["lr_drop_epochs"]),
                             lr_drop_factor=float(sec["lr_drop_factor"]), seed=seed_for(cfg, "dp_sweep"),
                             dp=dp_cfg, max_steps=max_steps)


def curv_params(cfg):
    c = cfg["curvature"]
    return CurvParams(h=float(c["h"]), n=int(c["n"]), seed=seed_for(cfg, "curvature"), mode=c["mode"])


def experiment_seed(cfg, name):
    return seed_for(cfg, "experiment", name)


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
