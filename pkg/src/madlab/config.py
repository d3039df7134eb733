"""Flat key=value configuration files.

One dotted key per line, ``#`` comments, every key carries a documented
default, unknown keys are rejected. ``parse(serialize(c)) == c`` holds for
any config dict c. Conversion to the typed experiment config lives here so
the trainer stays independent of the file format.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .data import AugmentationConfig, GeneratorConfig
from .errors import ConfigError
from .trainer import (ExperimentConfig, FinetuneConfig, ModelDims,
                      PretrainConfig)


@dataclass(frozen=True)
class _Key:
    kind: str      # int | float | bool | str | int_list
    default: object
    doc: str


_REGISTRY: dict[str, _Key] = {
    "data.dim": _Key("int", 32, "feature dimensionality D"),
    "data.modes": _Key("int", 4, "number of normal modes M"),
    "data.train_size": _Key("int", 2000, "train split size"),
    "data.val_size": _Key("int", 1000, "validation split size"),
    "data.test_size": _Key("int", 1000, "test split size"),
    "data.contamination": _Key("float", 0.05,
                               "abnormal fraction hidden in train"),
    "data.labeled_ratio": _Key("float", 0.05,
                               "fraction of train samples carrying labels"),
    "data.labeled_normal_fraction": _Key(
        "float", 0.5, "share of the labeled subset that is known-normal"),
    "data.eval_abnormal_ratio": _Key("float", 0.5,
                                     "abnormal fraction in val/test"),
    "data.mode_sigma": _Key("float", 1.0, "the generator's sigma unit"),
    "data.cloud_radius": _Key("float", 5.0,
                              "expected normal in-plane radial distance, sigma"),
    "data.normal_rank": _Key("int", 26,
                             "normal-subspace rank (clamped to dim)"),
    "data.ambient_noise": _Key("float", 0.1,
                               "full-dimension noise std on normals, sigma"),
    "data.shell_inner": _Key("float", 4.0, "anomaly shell inner radius, sigma"),
    "data.shell_outer": _Key("float", 8.0, "anomaly shell outer radius, sigma"),
    "data.center_spacing": _Key("float", 9.0,
                                "target mode-center spacing, sigma (min 8)"),
    "data.midpoint_fraction": _Key(
        "float", 0.3, "share of anomaly groups placed at inter-mode midpoints"),
    "data.group_size": _Key("int", 4, "samples per group (study analog)"),
    "augment.noise_sigma": _Key("float", 1.0, "additive noise std per view"),
    "augment.scale_jitter": _Key("float", 0.1,
                                 "multiplicative jitter range 1 +- value"),
    "augment.dropout_prob": _Key("float", 0.2,
                                 "per-coordinate zeroing probability"),
    "model.body": _Key("int_list", (64, 32), "encoder body widths"),
    "model.proj_dim": _Key("int", 16, "projection-head output dim"),
    "model.mad_dim": _Key("int", 16, "detection-head output dim"),
    "pretrain.epochs": _Key("int", 100, "pretraining epochs"),
    "pretrain.batch": _Key("int", 24, "pretraining batch size (pairs)"),
    "pretrain.lr": _Key("float", 1e-3, "pretraining base learning rate"),
    "pretrain.milestones": _Key("int_list", (70, 90),
                                "epochs after which the lr decays"),
    "pretrain.decay_factor": _Key("float", 0.1, "lr multiplier per milestone"),
    "pretrain.temperature": _Key("float", 0.2, "contrastive temperature"),
    "pretrain.optimizer": _Key("str", "adam", "update rule: adam or sgd"),
    "pretrain.weight_decay": _Key("float", 1e-6, "decoupled L2 strength"),
    "finetune.epochs": _Key("int", 50, "fine-tuning epochs"),
    "finetune.batch": _Key("int", 32, "fine-tuning batch size"),
    "finetune.lr": _Key("float", 3e-3, "fine-tuning base learning rate"),
    "finetune.milestones": _Key("int_list", (), "fine-tune lr decay epochs"),
    "finetune.decay_factor": _Key("float", 0.1, "lr multiplier per milestone"),
    "finetune.eta": _Key("float", 1.0, "labeled-term weight"),
    "finetune.gamma": _Key("float", 0.05, "pruning fraction of max cardinality"),
    "finetune.n_s": _Key("int", 100, "initial hypersphere center count"),
    "finetune.weight_decay": _Key("float", 1e-6,
                                  "objective L2 term, applied as decay"),
    "finetune.eps_d": _Key("float", 1e-6,
                           "squared-distance floor in the abnormal branch"),
    "finetune.optimizer": _Key("str", "adam", "update rule: adam or sgd"),
    "finetune.update_centers": _Key("bool", False,
                                    "refresh live centers each epoch"),
    "eval.knn_k": _Key("int", 100, "neighbor count for the kNN score"),
    "run.seed": _Key("int", 0, "base seed; replicate r uses seed + r"),
    "run.replicates": _Key("int", 4, "number of replicates"),
}


def _parse_value(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text not in ("true", "false"):
                raise ValueError("expected true or false")
            return text == "true"
        if kind == "str":
            return text
        if kind == "int_list":
            if not text:
                return ()
            return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    raise ConfigError(f"unknown kind {kind}")


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "int_list":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def default_config() -> dict:
    return {k: spec.default for k, spec in _REGISTRY.items()}


def parse_config(text: str) -> dict:
    """Full config dict: documented defaults overridden by the file."""
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _REGISTRY:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _parse_value(_REGISTRY[key].kind, value, key)
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: dict) -> str:
    """Canonical text form (registry order, doc comments)."""
    unknown = set(cfg) - set(_REGISTRY)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    lines = []
    for key, spec in _REGISTRY.items():
        value = cfg.get(key, spec.default)
        lines.append(f"{key}={_format_value(spec.kind, value)}  # {spec.doc}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: dict, pairs) -> dict:
    """--set KEY=VALUE overrides; returns a new dict."""
    out = dict(cfg)
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set needs KEY=VALUE, got {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        if key not in _REGISTRY:
            raise ConfigError(f"--set: unknown key {key!r}")
        out[key] = _parse_value(_REGISTRY[key].kind, value, key)
    return out


def config_hash(cfg: dict) -> str:
    canonical = "\n".join(
        f"{k}={_format_value(_REGISTRY[k].kind, cfg[k])}" for k in sorted(cfg))
    return hashlib.sha256(canonical.encode()).hexdigest()


def to_experiment(cfg: dict) -> ExperimentConfig:
    """Build the typed experiment config; run.seed seeds every component."""
    seed = cfg["run.seed"]
    return ExperimentConfig(
        data=GeneratorConfig(
            dim=cfg["data.dim"], modes=cfg["data.modes"],
            train_size=cfg["data.train_size"], val_size=cfg["data.val_size"],
            test_size=cfg["data.test_size"],
            contamination=cfg["data.contamination"],
            labeled_ratio=cfg["data.labeled_ratio"],
            labeled_normal_fraction=cfg["data.labeled_normal_fraction"],
            eval_abnormal_ratio=cfg["data.eval_abnormal_ratio"],
            mode_sigma=cfg["data.mode_sigma"],
            cloud_radius=cfg["data.cloud_radius"],
            normal_rank=cfg["data.normal_rank"],
            ambient_noise=cfg["data.ambient_noise"],
            shell_inner=cfg["data.shell_inner"],
            shell_outer=cfg["data.shell_outer"],
            center_spacing=cfg["data.center_spacing"],
            midpoint_fraction=cfg["data.midpoint_fraction"],
            group_size=cfg["data.group_size"], seed=seed),
        augment=AugmentationConfig(
            noise_sigma=cfg["augment.noise_sigma"],
            scale_jitter=cfg["augment.scale_jitter"],
            dropout_prob=cfg["augment.dropout_prob"], seed=seed),
        dims=ModelDims(
            input_dim=cfg["data.dim"], body=tuple(cfg["model.body"]),
            proj_dim=cfg["model.proj_dim"], mad_dim=cfg["model.mad_dim"]),
        pretrain=PretrainConfig(
            epochs=cfg["pretrain.epochs"], batch=cfg["pretrain.batch"],
            lr=cfg["pretrain.lr"],
            milestones=tuple(cfg["pretrain.milestones"]),
            decay_factor=cfg["pretrain.decay_factor"],
            temperature=cfg["pretrain.temperature"],
            optimizer=cfg["pretrain.optimizer"],
            weight_decay=cfg["pretrain.weight_decay"]),
        finetune=FinetuneConfig(
            epochs=cfg["finetune.epochs"], batch=cfg["finetune.batch"],
            lr=cfg["finetune.lr"],
            milestones=tuple(cfg["finetune.milestones"]),
            decay_factor=cfg["finetune.decay_factor"],
            eta=cfg["finetune.eta"], gamma=cfg["finetune.gamma"],
            n_s=cfg["finetune.n_s"],
            weight_decay=cfg["finetune.weight_decay"],
            eps_d=cfg["finetune.eps_d"],
            optimizer=cfg["finetune.optimizer"],
            update_centers=cfg["finetune.update_centers"]),
        knn_k=cfg["eval.knn_k"], seed=seed,
        replicates=cfg["run.replicates"])
