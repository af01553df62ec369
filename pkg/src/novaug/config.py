"""Experiment configuration: a flat `key = value` file with dotted sections.

Unknown keys are errors. ``--set key=value`` overrides use the same dotted
namespace. The canonical rendering (sorted keys) feeds the config hash that
stamps every output artifact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .losses import LOSS_KINDS, LossParams
from .ot import SinkhornParams

METHODS = ("vanilla", "ps", "l2a_ec", "l2a_nc")


class ConfigError(ValueError):
    """Invalid configuration; ``fields`` lists every offending key."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.fields = list(problems)
        super().__init__("; ".join(self.fields))


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


# key -> (parser, default)
KEY_SPECS = {
    "method": (str, "l2a_nc"),
    "seed": (int, 0),
    "loss.kind": (str, "proxy_anchor"),
    "loss.alpha": (float, 32.0),
    "loss.delta": (float, 0.1),
    "loss.temperature": (float, 1.0),
    "model.embedding_dim": (int, 32),
    "model.trunk_hidden": (_parse_int_list, (128,)),
    "model.generator_hidden": (int, 0),  # 0 = 4 * embedding_dim
    "model.noise_dim": (int, 16),
    "data.kind": (str, "synthetic"),
    "data.train_classes": (int, 64),
    "data.test_classes": (int, 64),
    "data.samples_per_class": (int, 40),
    "data.input_dim": (int, 64),
    "data.cluster_spread": (float, 0.13),
    "data.min_angle_deg": (float, 25.0),
    "data.seed": (int, -1),  # -1 = reuse the run seed
    "data.train_path": (str, ""),
    "data.test_path": (str, ""),
    # novel-class count must fit the embedding space: past ~50% of the real
    # class count, the extra proxy anchors crowd a 32-d sphere and unseen
    # recall drops below the unaugmented baseline
    "novel.count": (int, 0),  # 0 = derive from ratio
    "novel.ratio": (float, 0.5),
    "lambda_div": (float, 1.0),
    "ot.epsilon": (float, 0.05),
    "ot.max_iterations": (int, 200),
    "ot.convergence_tol": (float, 1e-6),
    "ot.debug_dump": (_parse_bool, False),
    "train.batch_size": (int, 32),
    # half-size synthetic batches: a 1:1 union halves the real-data signal
    # per step, which desk-scale budgets cannot afford
    "train.synthetic_batch_size": (int, 16),
    "train.pretrain_f_steps": (int, 1000),
    "train.pretrain_g_steps": (int, 500),
    "train.joint_steps": (int, 1000),
    "train.lr_pretrain_f": (float, 1e-4),
    # generator rates must match the short stage budgets: at 1e-4 over 500
    # steps AdamW displaces each weight by at most ~0.05, leaving the
    # class conditioning untrained
    "train.lr_pretrain_g": (float, 1e-3),
    "train.lr_joint_f": (float, 5e-5),
    "train.lr_joint_g": (float, 1e-3),
    "train.weight_decay": (float, 1e-4),
    "ps.alpha": (float, 2.0),
    "eval.recall_k": (_parse_int_list, (1, 2, 4, 8)),
}


def parse_config_text(text, source="<config>"):
    """Parse `key = value` lines; '#' starts a comment. Unknown keys error."""
    values = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected `key = value`, got {raw!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KEY_SPECS:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        parser, _ = KEY_SPECS[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            problems.append(f"{source}:{lineno}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def apply_overrides(values, overrides):
    """Apply `key=value` strings from the command line onto parsed values."""
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not key=value")
            continue
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in KEY_SPECS:
            problems.append(f"unknown override key {key!r}")
            continue
        parser, _ = KEY_SPECS[key]
        try:
            values[key] = parser(value.strip())
        except ValueError as exc:
            problems.append(f"bad override value for {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def _render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return format(value, "g")
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, overrides=None):
        merged = {key: default for key, (_, default) in KEY_SPECS.items()}
        merged.update(overrides or {})
        config = cls(merged)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path, overrides=()):
        with open(path) as fh:
            values = parse_config_text(fh.read(), source=str(path))
        apply_overrides(values, overrides)
        return cls.from_values(values)

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        problems = []
        v = self.values
        if v["method"] not in METHODS:
            problems.append(f"method: must be one of {METHODS}, got {v['method']!r}")
        if v["loss.kind"] not in LOSS_KINDS:
            problems.append(f"loss.kind: must be one of {LOSS_KINDS}")
        for key in ("loss.alpha", "loss.temperature", "ot.epsilon", "ps.alpha"):
            if v[key] <= 0:
                problems.append(f"{key}: must be positive")
        for key in (
            "model.embedding_dim",
            "model.noise_dim",
            "data.input_dim",
            "data.train_classes",
            "data.test_classes",
            "data.samples_per_class",
            "train.batch_size",
            "ot.max_iterations",
        ):
            if v[key] < 1:
                problems.append(f"{key}: must be >= 1")
        if v["lambda_div"] < 0:
            problems.append("lambda_div: must be >= 0")
        if v["novel.count"] < 0 or v["novel.ratio"] < 0:
            problems.append("novel.count and novel.ratio must be >= 0")
        for key in (
            "train.pretrain_f_steps",
            "train.pretrain_g_steps",
            "train.joint_steps",
        ):
            if v[key] < 0:
                problems.append(f"{key}: must be >= 0")
        for key in (
            "train.lr_pretrain_f",
            "train.lr_pretrain_g",
            "train.lr_joint_f",
            "train.lr_joint_g",
        ):
            if v[key] <= 0:
                problems.append(f"{key}: must be positive")
        if v["data.kind"] not in ("synthetic", "feature_file"):
            problems.append("data.kind: must be synthetic or feature_file")
        if v["data.kind"] == "feature_file":
            if not v["data.train_path"] or not v["data.test_path"]:
                problems.append(
                    "data.train_path and data.test_path are required for feature_file"
                )
        if not v["model.trunk_hidden"]:
            problems.append("model.trunk_hidden: need at least one hidden width")
        if v["method"] in ("l2a_nc", "l2a_ec", "ps") and v["train.batch_size"] < 2:
            problems.append(f"train.batch_size: {v['method']} needs >= 2")
        if (
            v["method"] in ("l2a_nc", "l2a_ec")
            and v["lambda_div"] > 0
            and v["train.batch_size"] < 4
        ):
            problems.append("train.batch_size: divergence loss needs >= 4 rows")
        if problems:
            raise ConfigError(problems)

    # -- derived quantities --------------------------------------------------

    @property
    def method(self):
        return self.values["method"]

    @property
    def seed(self):
        return self.values["seed"]

    def data_seed(self):
        ds = self.values["data.seed"]
        return self.seed if ds < 0 else ds

    def novel_count(self, num_real_classes):
        if self.method == "vanilla":
            return 0
        if self.values["novel.count"] > 0:
            return self.values["novel.count"]
        return int(round(self.values["novel.ratio"] * num_real_classes))

    def loss_params(self):
        return LossParams(
            kind=self.values["loss.kind"],
            alpha=self.values["loss.alpha"],
            delta=self.values["loss.delta"],
            temperature=self.values["loss.temperature"],
        )

    def sinkhorn_params(self):
        return SinkhornParams(
            epsilon=self.values["ot.epsilon"],
            max_iterations=self.values["ot.max_iterations"],
            convergence_tol=self.values["ot.convergence_tol"],
        )

    def synthetic_batch_size(self):
        m = self.values["train.synthetic_batch_size"]
        return self.values["train.batch_size"] if m == 0 else m

    def generator_hidden(self):
        h = self.values["model.generator_hidden"]
        return 4 * self.values["model.embedding_dim"] if h == 0 else h

    def canonical_text(self):
        lines = [
            f"{key} = {_render_value(self.values[key])}" for key in sorted(self.values)
        ]
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def with_updates(self, **updates):
        merged = dict(self.values)
        merged.update(updates)
        return ExperimentConfig.from_values(merged)
