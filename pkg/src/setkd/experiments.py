"""Teacher and student runs on the synthetic benchmark, keyed by named settings."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .toy.scenes import Dataset, make_dataset
from .toy.train import TeacherKnowledge, TrainResult, evaluate, train

# name -> (components, DistillConfig overrides)
SETTINGS = {
    "none": ((), {}),
    "LD": (("LD",), {}),
    "FD": (("FD",), {}),
    "AD": (("AD",), {}),
    "LD+FD": (("LD", "FD"), {}),
    "LD+FD+AD": (("LD", "FD", "AD"), {}),
    "FD-vanilla": (("FD",), {"feat_mode": "vanilla"}),
    "LD-pos-only": (("LD",), {"neg_reg": False}),
    "LD-last-stage": (("LD",), {"progressive": False}),
}


def derived_seed(seed: int, purpose: int) -> int:
    """Independent stream per purpose (1 train data, 2 val data, 3 teacher)."""
    return int(np.random.SeedSequence(seed, spawn_key=(purpose,)).generate_state(1)[0])


def make_data(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    return (make_dataset(cfg["run.n_train"], derived_seed(seed, 1)),
            make_dataset(cfg["run.n_val"], derived_seed(seed, 2)))


def setting_name(components) -> str:
    comps = [c for c in ("LD", "FD", "AD") if c in set(components)]
    return "+".join(comps) if comps else "none"


def train_teacher(cfg: RunConfig, seed: int, train_set: Dataset, val_set: Dataset) -> TrainResult:
    tc = cfg.train_config("teacher", derived_seed(seed, 3))
    return train(tc, train_set, val_set, eval_every=cfg["run.eval_every"])


def build_knowledge(cfg: RunConfig, teacher: dict, train_set: Dataset) -> TeacherKnowledge:
    return TeacherKnowledge.build(teacher, train_set, cfg.cost(), cfg["distill.gamma"],
                                  cfg["distill.mask_temperature"])


def run_student(cfg: RunConfig, seed: int, name: str, train_set: Dataset, val_set: Dataset,
                knowledge: TeacherKnowledge | None) -> TrainResult:
    comps, overrides = SETTINGS[name] if name in SETTINGS else (tuple(name.split("+")), {})
    tc = cfg.replace(**{f"distill.{k}": v for k, v in overrides.items()}).train_config("student", seed, comps)
    return train(tc, train_set, val_set, knowledge=knowledge if comps else None, eval_every=cfg["run.eval_every"])


@dataclass
class SeedRuns:
    """Everything one seed produced, with process CPU seconds per run
    (plus ``knowledge``, the one-off teacher pass shared by distilled runs)."""

    seed: int
    teacher: TrainResult
    students: dict[str, TrainResult] = field(default_factory=dict)
    cpu: dict[str, float] = field(default_factory=dict)

    def final_map(self, name: str) -> float:
        return self.students[name].final_map

    def is_after_first_epoch(self, name: str) -> float:
        return float(next(r["mean_IS"] for r in self.students[name].log if r["epoch"] == 1))


def run_seed(cfg: RunConfig, seed: int, names, teacher: dict | None = None) -> SeedRuns:
    """Train (or reuse) the teacher, then every named student setting."""
    train_set, val_set = make_data(cfg, seed)
    t0 = time.process_time()
    if teacher is None:
        t_res = train_teacher(cfg, seed, train_set, val_set)
    else:
        m = evaluate(teacher, val_set, cfg.cost())
        t_res = TrainResult(teacher, [{"epoch": 0, "mAP": f"{m.mAP:.6f}", "mean_IS": f"{m.mean_is:.6f}"}])
    out = SeedRuns(seed, t_res)
    out.cpu["teacher"] = time.process_time() - t0
    knowledge = None
    if any(n != "none" for n in names):
        t0 = time.process_time()
        knowledge = build_knowledge(cfg, t_res.params, train_set)
        out.cpu["knowledge"] = time.process_time() - t0
    for name in names:
        t0 = time.process_time()
        out.students[name] = run_student(cfg, seed, name, train_set, val_set, knowledge)
        out.cpu[name] = time.process_time() - t0
    return out
