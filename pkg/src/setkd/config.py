"""Run configuration: INI files read with :mod:`configparser`.

Every key has a default; unknown sections or keys are rejected. The
effective configuration is rendered back to canonical INI text, which is
echoed by the CLI and hashed to name run directories.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .matching_cost import CostWeights
from .toy.train import COMPONENTS, DistillConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _components(s: str) -> tuple[str, ...]:
    parts = [p for p in s.replace(",", " ").replace("+", " ").split() if p.lower() != "none"]
    bad = [p for p in parts if p not in COMPONENTS]
    if bad:
        raise ValueError(f"unknown components {bad}; choose from {list(COMPONENTS)}")
    return tuple(c for c in COMPONENTS if c in parts)


def _temperature(s: str):
    return None if s.strip().lower() == "auto" else float(s)


def _optional_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(v) if v else "none"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class Field:
    section: str
    key: str
    default: Any
    parse: Callable[[str], Any]
    doc: str
    render: Callable[[Any], str] = _fmt


FIELDS = (
    Field("run", "seed", None, _optional_int, "master seed; required for train/distill unless --seed is given"),
    Field("run", "n_train", 500, int, "training scenes"),
    Field("run", "n_val", 100, int, "held-out scenes for AP and IS"),
    Field("run", "eval_every", 1, int, "evaluate every this many epochs (epochs 0, 1 and the last always)"),
    Field("run", "ablation", False, _bool, "distill: also run every row of the ablation table"),
    Field("teacher", "d", 32, int, "teacher width"),
    Field("teacher", "steps", 5000, int, "teacher training steps"),
    Field("teacher", "n_stages", 3, int, "teacher decoder stages"),
    Field("student", "d", 16, int, "student width"),
    Field("student", "steps", 2000, int, "student training steps"),
    Field("student", "n_stages", 3, int, "student decoder stages (at most the teacher's)"),
    Field("train", "n_queries", 10, int, "object queries per model"),
    Field("train", "lr", 2e-3, float, "learning rate"),
    Field("train", "batch_size", 8, int, "scenes per step"),
    Field("train", "momentum", 0.9, float, "momentum coefficient"),
    Field("train", "clip_norm", 100.0, float, "global gradient-norm clip against spikes, 0 disables"),
    Field("train", "lr_drop_at", 0.8, float, "fraction of steps after which the rate is scaled"),
    Field("train", "lr_drop", 0.1, float, "scale applied to the rate after lr_drop_at"),
    Field("cost", "w_cls", 1.0, float, "classification weight in matching and loss"),
    Field("cost", "w_l1", 5.0, float, "L1 box weight"),
    Field("cost", "w_giou", 2.0, float, "GIoU weight"),
    Field("cost", "cls_mode", "prob", str, "matching classification cost: prob or focal"),
    Field("distill", "components", COMPONENTS, _components, "any of LD FD AD, or none"),
    Field("distill", "lambda_logits", 1.0, float, "weight of the logits term"),
    Field("distill", "lambda_feat", 20.0, float, "weight of the feature term"),
    Field("distill", "lambda_assign", 1.0, float, "weight of the assignment term"),
    Field("distill", "gamma", 0.5, float, "quality score exponent: c^gamma * iou^(1 - gamma)"),
    Field("distill", "feat_mode", "target_aware", str, "target_aware or vanilla (mean mask)"),
    Field("distill", "pos_cls", True, _bool, "logits KD: classification toward teacher positives"),
    Field("distill", "pos_reg", True, _bool, "logits KD: boxes toward teacher positives"),
    Field("distill", "neg_reg", True, _bool, "logits KD: boxes toward teacher negatives"),
    Field("distill", "progressive", True, _bool, "stage-wise teacher sources; false uses the last stage"),
    Field("distill", "mask_temperature", None, _temperature, "query mask softmax temperature; auto is sqrt(teacher d)",
          lambda v: "auto" if v is None else repr(v)),
)
_BY_NAME = {(f.section, f.key): f for f in FIELDS}


class RunConfig:
    """Effective values keyed by ``(section, key)``."""

    def __init__(self, values: dict | None = None):
        self.values = {(f.section, f.key): f.default for f in FIELDS}
        for k, v in (values or {}).items():
            if k not in _BY_NAME:
                raise ConfigError(f"unknown config key {k[0]}.{k[1]}")
            self.values[k] = v
        self._validate()

    def __getitem__(self, name: str):
        section, key = name.split(".")
        return self.values[(section, key)]

    def replace(self, **dotted) -> "RunConfig":
        vals = dict(self.values)
        for name, v in dotted.items():
            section, key = name.split("__") if "__" in name else name.split(".")
            if (section, key) not in _BY_NAME:
                raise ConfigError(f"unknown config key {section}.{key}")
            vals[(section, key)] = v
        return RunConfig(vals)

    def _validate(self):
        try:
            self.cost()
            self.distill()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self["student.n_stages"] > self["teacher.n_stages"]:
            raise ConfigError("student.n_stages exceeds teacher.n_stages")
        for name in ("run.n_train", "run.n_val", "run.eval_every", "teacher.steps", "student.steps",
                     "train.batch_size", "teacher.d", "student.d", "train.n_queries"):
            if self[name] < 1:
                raise ConfigError(f"{name} must be positive")

    def cost(self) -> CostWeights:
        return CostWeights(self["cost.w_cls"], self["cost.w_l1"], self["cost.w_giou"], self["cost.cls_mode"])

    def distill(self, components=None) -> DistillConfig:
        return DistillConfig(
            components=frozenset(self["distill.components"] if components is None else components),
            lambda_logits=self["distill.lambda_logits"],
            lambda_feat=self["distill.lambda_feat"],
            lambda_assign=self["distill.lambda_assign"],
            gamma=self["distill.gamma"],
            feat_mode=self["distill.feat_mode"],
            pos_cls=self["distill.pos_cls"],
            pos_reg=self["distill.pos_reg"],
            neg_reg=self["distill.neg_reg"],
            progressive=self["distill.progressive"],
            mask_temperature=self["distill.mask_temperature"],
        )

    def train_config(self, role: str, seed: int, components=None) -> TrainConfig:
        if role not in ("teacher", "student"):
            raise ValueError(role)
        return TrainConfig(
            steps=self[f"{role}.steps"],
            lr=self["train.lr"],
            batch_size=self["train.batch_size"],
            seed=seed,
            momentum=self["train.momentum"],
            clip_norm=self["train.clip_norm"],
            lr_drop_at=self["train.lr_drop_at"],
            lr_drop=self["train.lr_drop"],
            d=self[f"{role}.d"],
            n_queries=self["train.n_queries"],
            n_stages=self[f"{role}.n_stages"],
            cost=self.cost(),
            distill=self.distill(components) if role == "student" else DistillConfig(),
        )

    def to_ini(self, sections=None) -> str:
        """Canonical text: fixed section and key order, one ``key = value`` per line."""
        out, current = [], None
        for f in FIELDS:
            if sections is not None and f.section not in sections:
                continue
            if f.section != current:
                if current is not None:
                    out.append("")
                out.append(f"[{f.section}]")
                current = f.section
            out.append(f"{f.key} = {f.render(self.values[(f.section, f.key)])}")
        return "\n".join(out) + "\n"

    def digest(self, sections=None) -> str:
        """Short hash of the canonical text with the seed left out."""
        vals = dict(self.values)
        vals[("run", "seed")] = None
        text = RunConfig(vals).to_ini(sections)
        return hashlib.sha256(text.encode()).hexdigest()[:10]


def parse_ini(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = {f.section for f in FIELDS}
    values = {}
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            f = _BY_NAME.get((sec, key))
            if f is None:
                raise ConfigError(f"{source}: unknown key {sec}.{key}")
            try:
                values[(sec, key)] = f.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: {sec}.{key}: {exc}") from None
    return RunConfig(values)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_ini(p.read_text(), str(p))


def annotated_example() -> str:
    """Every key with its default and a one-line description."""
    out, current = [], None
    for f in FIELDS:
        if f.section != current:
            if current is not None:
                out.append("")
            out.append(f"[{f.section}]")
            current = f.section
        out.append(f"# {f.doc}")
        out.append(f"{f.key} = {f.render(f.default)}")
    return "\n".join(out) + "\n"
