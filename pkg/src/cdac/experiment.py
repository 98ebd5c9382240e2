"""Flat ``key = value`` experiment configs and the artifacts a run writes.

A config is a list of dotted keys, one per line, with ``#`` comments::

    data.generator = two_moons
    data.rotation = 30
    train.method = cdac

Only ``data.generator`` and ``train.method`` are required. Serializing a parsed
config writes every key, so the echo alone reproduces the run.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .data import AugmentConfig, SsdaDataset, make_gaussian_blobs_shift, make_two_moons_shift
from .model import HyperParams
from .trainer import METHODS, SCHEDULES, SETTINGS, RunMetrics, TrainConfig, feature_dump, run_experiment

OUTPUT_ROOT_ENV = "CDAC_OUTPUT_ROOT"
GENERATORS = ("two_moons", "blobs")
REQUIRED = ("data.generator", "train.method")


class ConfigError(ValueError):
    """Invalid config text; the message names the offending key path."""


class SchemaError(ValueError):
    """A metrics file does not have the expected columns."""


# key -> (type, default). Types: bool, int, float, str, "ints" (comma list), "int?" (int or none).
SCHEMA: dict[str, tuple[Any, Any]] = {
    "data.generator": (str, None),
    "data.n_per_domain": (int, 500),
    "data.rotation": (float, 30.0),
    "data.noise": (float, 0.1),
    "data.num_classes": (int, 4),
    "data.dim": (int, 8),
    "data.mean_shift": (float, 2.0),
    "data.covariance_scale": (float, 1.0),
    "data.shots": (int, 3),
    "data.seed": (int, 0),
    "model.hidden_dims": ("ints", (64, 32)),
    "model.feature_dim": (int, 32),
    "model.temperature": (float, 0.05),
    "model.k": (int, 5),
    "hp.lam": (float, 1.0),
    "hp.tau": (float, 0.95),
    "hp.nu": (float, 30.0),
    "hp.ramp_steps": ("int?", None),
    "hp.batch_source": (int, 16),
    "hp.batch_target": (int, 16),
    "hp.batch_unlabeled": (int, 32),
    "optim.lr": (float, 0.01),
    "optim.gamma": (float, 1e-4),
    "optim.power": (float, 0.75),
    "optim.momentum": (float, 0.9),
    "augment.sigma": (float, 0.05),
    "augment.scale_low": (float, 0.9),
    "augment.scale_high": (float, 1.1),
    "augment.dropout": (float, 0.05),
    "train.method": (str, None),
    "train.use_aac": (bool, True),
    "train.use_pl": (bool, True),
    "train.use_con": (bool, True),
    "train.setting": (str, "ssda"),
    "train.epochs": (int, 10),
    "train.steps_per_epoch": (int, 100),
    "train.eval_every": (int, 100),
    "train.reduction": (str, "mean"),
    "train.schedule": (str, "two_phase"),
    "run.seed": (int, 0),
    "run.name": (str, "run"),
    "run.output_dir": (str, "runs"),
    "run.emit_features": (bool, False),
}

CHOICES = {
    "data.generator": GENERATORS,
    "train.method": METHODS,
    "train.setting": SETTINGS,
    "train.schedule": SCHEDULES,
    "train.reduction": ("sum", "mean"),
}


def _convert(key: str, kind, raw: str):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == "ints":
            return tuple(int(part) for part in text.split(",") if part.strip())
        if kind == "int?":
            return None if text.lower() == "none" else int(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {_type_name(kind)}") from None
    if not text:
        raise ConfigError(f"{key}: empty value")
    return text


def _type_name(kind) -> str:
    return {bool: "bool", int: "int", float: "float", str: "str",
            "ints": "comma-separated ints", "int?": "int or none"}[kind]


def _render(kind, value) -> str:
    if kind is bool:
        return "true" if value else "false"
    if kind is float:
        return repr(float(value))
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "int?":
        return "none" if value is None else str(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted keys given as ``data__seed=3`` style keyword arguments."""
        vals = dict(self.values)
        for name, v in overrides.items():
            key = name.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"{key}: unknown key")
            vals[key] = v
        return validate(vals)

    def serialize(self) -> str:
        lines = [f"{key} = {_render(SCHEMA[key][0], self.values[key])}" for key in SCHEMA]
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()}

    # ---- builders

    def dataset(self) -> SsdaDataset:
        v = self.values
        if v["data.generator"] == "two_moons":
            return make_two_moons_shift(v["data.n_per_domain"], v["data.rotation"], v["data.noise"],
                                        seed=v["data.seed"], shots=v["data.shots"])
        return make_gaussian_blobs_shift(v["data.num_classes"], v["data.dim"], v["data.mean_shift"],
                                         v["data.covariance_scale"], v["data.n_per_domain"],
                                         seed=v["data.seed"], shots=v["data.shots"])

    def train_config(self) -> TrainConfig:
        v = self.values
        hp = HyperParams(lam=v["hp.lam"], tau=v["hp.tau"], nu=v["hp.nu"], k=v["model.k"],
                         temperature=v["model.temperature"], ramp_steps=v["hp.ramp_steps"],
                         lr=v["optim.lr"], lr_gamma=v["optim.gamma"], lr_power=v["optim.power"],
                         momentum=v["optim.momentum"], batch_source=v["hp.batch_source"],
                         batch_target=v["hp.batch_target"], batch_unlabeled=v["hp.batch_unlabeled"],
                         seed=v["run.seed"])
        aug = AugmentConfig(v["augment.sigma"], (v["augment.scale_low"], v["augment.scale_high"]),
                            v["augment.dropout"])
        return TrainConfig(hp=hp, method=v["train.method"], use_aac=v["train.use_aac"], use_pl=v["train.use_pl"],
                           use_con=v["train.use_con"], setting=v["train.setting"], epochs=v["train.epochs"],
                           steps_per_epoch=v["train.steps_per_epoch"], eval_every=v["train.eval_every"],
                           reduction=v["train.reduction"], schedule=v["train.schedule"],
                           hidden_dims=tuple(v["model.hidden_dims"]), feature_dim=v["model.feature_dim"],
                           augment=aug)

    @property
    def arm(self) -> str:
        """Label grouping runs that differ only by seed."""
        v = self.values
        if v["train.method"] != "cdac":
            name = v["train.method"]
        else:
            terms = [t for t, on in (("AAC", v["train.use_aac"]), ("PL", v["train.use_pl"]),
                                     ("Con", v["train.use_con"])) if on]
            name = "cdac" if len(terms) == 3 else "+".join(["CE"] + terms)
        return f"{v['train.setting']}:{name}"

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.values["run.output_dir"])


def validate(values: dict[str, Any]) -> ExperimentConfig:
    """Fill defaults, check required keys and choices, and build the domain objects once."""
    for key in values:
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key")
    for key in REQUIRED:
        if values.get(key) is None:
            raise ConfigError(f"{key}: required key is missing")
    full = {key: values.get(key, default) for key, (_, default) in SCHEMA.items()}
    for key, options in CHOICES.items():
        if full[key] not in options:
            raise ConfigError(f"{key}: must be one of {', '.join(options)}, got {full[key]!r}")
    if not full["run.name"] or any(ch in full["run.name"] for ch in "/\\"):
        raise ConfigError(f"run.name: not a plain directory name: {full['run.name']!r}")
    cfg = ExperimentConfig(full)
    try:
        cfg.train_config()
    except ValueError as err:
        raise ConfigError(f"train/hp: {err}") from None
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        if key in values:
            raise ConfigError(f"{key}: given twice (line {lineno})")
        values[key] = _convert(key, SCHEMA[key][0], raw)
    return validate(values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ------------------------------------------------------------------ running

ABLATION_ROWS = (
    ("CE", False, False, False),
    ("CE+AAC", True, False, False),
    ("CE+PL", False, True, False),
    ("CE+AAC+PL", True, True, False),
    ("CE+AAC+PL+Con", True, True, True),
)


def ablation_configs(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """UDA rows first, then SSDA, each over the five loss combinations."""
    out = []
    for setting in ("uda", "ssda"):
        for label, aac, pl, con in ABLATION_ROWS:
            cfg = base.with_values(train__method="cdac", train__setting=setting, train__use_aac=aac,
                                   train__use_pl=pl, train__use_con=con)
            out.append((f"{setting}_{label.replace('+', '_')}", cfg))
    return out


def summary(cfg: ExperimentConfig, metrics: RunMetrics) -> dict:
    return {"arm": cfg.arm, "seed": cfg["run.seed"], "final_accuracy": metrics.final_accuracy,
            "best_accuracy": metrics.best_accuracy, "config": cfg.as_dict()}


def write_run(cfg: ExperimentConfig, out_dir: Path) -> RunMetrics:
    """Train one configuration and write its artifacts into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.serialize())
    dataset = cfg.dataset()
    metrics, params = run_experiment(cfg.train_config(), dataset, return_params=True)
    (out_dir / "metrics.csv").write_text(metrics.to_csv())
    (out_dir / "summary.json").write_text(json.dumps(summary(cfg, metrics), indent=2, sort_keys=True) + "\n")
    if cfg["run.emit_features"]:
        (out_dir / "features.csv").write_text(feature_dump(params, dataset))
    return metrics


# ------------------------------------------------------------------ compare

REQUIRED_COLUMNS = ("step", "accuracy")


@dataclass
class MetricsFile:
    path: Path
    arm: str
    seed: str
    final_accuracy: float
    best_accuracy: float


def read_metrics(path) -> MetricsFile:
    path = Path(path)
    try:
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
    except (OSError, UnicodeDecodeError) as err:
        raise SchemaError(f"{path}: cannot read metrics ({err})") from None
    if not rows:
        raise SchemaError(f"{path}: no metric rows")
    missing = [c for c in REQUIRED_COLUMNS if c not in rows[0]]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    try:
        acc = [float(r["accuracy"]) for r in rows]
        [int(r["step"]) for r in rows]
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: non-numeric step or accuracy value") from None
    arm, seed = path.parent.name, "?"
    side = path.parent / "summary.json"
    if side.exists():
        info = json.loads(side.read_text())
        arm, seed = str(info.get("arm", arm)), str(info.get("seed", seed))
    return MetricsFile(path, arm, seed, acc[-1], max(acc))


@dataclass
class Comparison:
    files: list[MetricsFile]
    arms: dict[str, dict[str, float]]

    def text(self) -> str:
        ref = self.files[0].final_accuracy
        lines = [f"{'file':<40} {'arm':<22} {'seed':>5} {'final':>8} {'best':>8} {'delta':>8}"]
        for f in self.files:
            lines.append(f"{str(f.path)[-40:]:<40} {f.arm:<22} {f.seed:>5} {f.final_accuracy:8.4f} "
                         f"{f.best_accuracy:8.4f} {f.final_accuracy - ref:+8.4f}")
        lines.append("")
        lines.append(f"{'arm':<22} {'n':>3} {'final mean':>11} {'final std':>10} {'best mean':>10} {'best std':>9}")
        for arm, s in self.arms.items():
            lines.append(f"{arm:<22} {int(s['n']):>3} {s['final_mean']:11.4f} {s['final_std']:10.4f} "
                         f"{s['best_mean']:10.4f} {s['best_std']:9.4f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "name", "arm", "seed", "n", "final", "final_std", "best", "best_std", "delta_final"])
        ref = self.files[0].final_accuracy
        for f in self.files:
            w.writerow(["file", str(f.path), f.arm, f.seed, 1, repr(f.final_accuracy), "", repr(f.best_accuracy), "",
                        repr(f.final_accuracy - ref)])
        for arm, s in self.arms.items():
            w.writerow(["arm", arm, arm, "", int(s["n"]), repr(s["final_mean"]), repr(s["final_std"]),
                        repr(s["best_mean"]), repr(s["best_std"]), ""])
        return buf.getvalue()


def _std(xs: list[float]) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def compare(paths) -> Comparison:
    """Per-file final/best accuracy plus per-arm mean and sample std (ddof=1)."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two metrics files")
    files = [read_metrics(p) for p in paths]
    headers = {tuple(Path(p).read_text().splitlines()[0].split(",")) for p in paths}
    if len(headers) > 1:
        raise SchemaError("metrics files have different column sets")
    grouped: dict[str, list[MetricsFile]] = {}
    for f in files:
        grouped.setdefault(f.arm, []).append(f)
    arms = {}
    for arm, group in grouped.items():
        finals = [f.final_accuracy for f in group]
        bests = [f.best_accuracy for f in group]
        arms[arm] = {"n": len(group), "final_mean": float(np.mean(finals)), "final_std": _std(finals),
                     "best_mean": float(np.mean(bests)), "best_std": _std(bests)}
    return Comparison(files, arms)

