"""Command-line interface.

Every command exits 0 only on full success, 1 when a check fails and 2 on
usage or configuration errors. Train and distill outputs go under
``--out`` in a directory named by the configuration hash and the seed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, annotated_example, load_config
from .evaluation import ABLATION_ROWS, ablation_table, table_csv, table_text
from .experiments import build_knowledge, make_data, run_student, setting_name, train_teacher
from .feature_kd import quality_weighted_mask
from .gradcheck import CHECKS, TOLERANCE, run_grad_check
from .oracle import run_oracle_check
from .report import is_curve, log_fields, read_csv, write_csv, write_curve_plots, write_mask, write_text
from .serialize import FormatError, load_params, save_params
from .toy.model import model_dims
from .toy.scenes import Dataset
from .toy.train import TrainingDiverged

log = logging.getLogger("setkd")

TEACHER_SECTIONS = ("run", "teacher", "train", "cost")


class CommandError(RuntimeError):
    """Expected failure with a message for the user."""


def _seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg["run.seed"]
    if seed is None:
        raise ConfigError("a seed is required: pass --seed N or set [run] seed")
    return int(seed)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "components", None) is not None:
        cfg = cfg.replace(**{"distill.components": tuple(c for c in ("LD", "FD", "AD") if c in args.components)})
    return cfg


def _echo(cfg: RunConfig, seed: int):
    print("# effective configuration")
    print(cfg.replace(**{"run.seed": seed}).to_ini(), end="")
    print()


def teacher_dir(out: Path, cfg: RunConfig, seed: int) -> Path:
    return Path(out) / f"teacher-{cfg.digest(TEACHER_SECTIONS)}-s{seed}"


def distill_dir(out: Path, cfg: RunConfig, seed: int) -> Path:
    return Path(out) / f"distill-{cfg.digest()}-s{seed}"


def _save_run(d: Path, result, cfg: RunConfig, seed: int, role: str):
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "log.csv", result.log, log_fields(result.log))
    rows, fields = is_curve(result.log)
    write_csv(d / "is_curve.csv", rows, fields)
    save_params(d / f"{role}.npz", result.params, {"role": role, "seed": seed})


def cmd_oracle_check(args) -> int:
    if args.trials == 0:
        print("warning: 0 trials requested, nothing was compared")
    rep = run_oracle_check(args.trials, args.max_size, args.seed)
    print(f"oracle-check: {rep.trials} trials, sizes 1..{rep.max_size}, "
          f"{len(rep.mismatches)} mismatches, {rep.seconds:.2f}s")
    for t, cost, got, ref in rep.mismatches[:5]:
        print(f"  trial {t}: solver {got.assign.tolist()} ({got.total_cost!r}) "
              f"vs oracle {ref.assign.tolist()} ({ref.total_cost!r})")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def cmd_grad_check(args) -> int:
    results = run_grad_check(args.seed, args.only, args.configs, args.coords)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{r.name:20s} configs={r.configs:4d} worst_rel_err={r.worst:.3e} "
              f"{r.seconds:6.2f}s {'ok' if r.passed else 'FAIL'}")
    print(f"tolerance {TOLERANCE:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _train_teacher_into(d: Path, cfg: RunConfig, seed: int, train_set, val_set) -> dict:
    log.info("training teacher (d=%d, %d steps)", cfg["teacher.d"], cfg["teacher.steps"])
    res = train_teacher(cfg, seed, train_set, val_set)
    _save_run(d, res, cfg, seed, "teacher")
    write_text(d / "config.ini", cfg.replace(**{"run.seed": seed}).to_ini(TEACHER_SECTIONS))
    print(f"teacher: final mAP {res.final_map:.4f} -> {d / 'teacher.npz'}")
    return res.params


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _echo(cfg, seed)
    train_set, val_set = make_data(cfg, seed)
    _train_teacher_into(teacher_dir(args.out, cfg, seed), cfg, seed, train_set, val_set)
    return 0


def _load_teacher(path: Path) -> dict:
    try:
        params, _ = load_params(path)
    except (OSError, FormatError) as exc:
        raise CommandError(f"cannot read teacher checkpoint {path}: {exc}") from None
    return params


def cmd_distill(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _echo(cfg, seed)
    train_set, val_set = make_data(cfg, seed)
    tpath = Path(args.teacher) if args.teacher else teacher_dir(args.out, cfg, seed) / "teacher.npz"
    if tpath.is_file():
        teacher = _load_teacher(tpath)
    elif args.train_teacher:
        teacher = _train_teacher_into(tpath.parent, cfg, seed, train_set, val_set)
    else:
        raise CommandError(f"teacher checkpoint {tpath} not found; run `setkd train` with the same "
                           "config and seed, or pass --train-teacher")

    rows = list(ABLATION_ROWS) if cfg["run.ablation"] else ["none", setting_name(cfg["distill.components"])]
    rows = list(dict.fromkeys(rows))
    d = distill_dir(args.out, cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    write_text(d / "config.ini", cfg.replace(**{"run.seed": seed}).to_ini())
    write_text(d / "teacher_checkpoint.txt", f"{tpath.resolve()}\n")
    knowledge = None
    logs, final = {}, {}
    for name in rows:
        if name != "none" and knowledge is None:
            knowledge = build_knowledge(cfg, teacher, train_set)
        log.info("student run %s", name)
        res = run_student(cfg, seed, name, train_set, val_set, knowledge)
        _save_run(d / name, res, cfg, seed, "student")
        logs[name], final[name] = res.log, res.final_map
        print(f"{name:10s} final mAP {res.final_map:.4f}")
    table = ablation_table(final)
    write_text(d / "ablation.csv", table_csv(table))
    write_text(d / "ablation.txt", table_text(table))
    write_curve_plots(d, logs)
    _export_mask(d, cfg, teacher, val_set, 0)
    print()
    print(table_text(table), end="")
    print(f"\noutputs in {d}")
    return 0


def _export_mask(d: Path, cfg: RunConfig, teacher: dict, val_set, scene: int):
    """Quality-weighted query mask of one validation scene."""
    one = Dataset([val_set.scenes[scene]], val_set.grids[scene : scene + 1], val_set.seed)
    kn = build_knowledge(cfg, teacher, one)
    sk = kn.scenes[0]
    mask = quality_weighted_mask(sk.masks, sk.qualities)
    write_mask(d / "masks", f"quality_mask_scene{scene}", mask,
               f"quality-weighted mask, val scene {scene} (d={model_dims(teacher)[0]})")


def cmd_report(args) -> int:
    d = Path(args.run)
    if not (d / "config.ini").is_file():
        raise CommandError(f"{d} is not a distill run directory (no config.ini)")
    order = {name: i for i, name in enumerate(ABLATION_ROWS)}
    paths = sorted(d.glob("*/log.csv"), key=lambda p: (order.get(p.parent.name, len(order)), p.parent.name))
    logs = {p.parent.name: read_csv(p) for p in paths}
    if not logs:
        raise CommandError(f"no run logs under {d}")
    for p in write_curve_plots(d, logs):
        print(p)
    final = {k: float(v[-1]["mAP"]) for k, v in logs.items()}
    table = ablation_table(final)
    write_text(d / "ablation.csv", table_csv(table))
    write_text(d / "ablation.txt", table_text(table))
    print(table_text(table), end="")
    tfile = d / "teacher_checkpoint.txt"
    if tfile.is_file():
        cfg = load_config(d / "config.ini")
        _, val_set = make_data(cfg, int(cfg["run.seed"]))
        if not 0 <= args.scene < len(val_set):
            raise CommandError(f"scene {args.scene} outside 0..{len(val_set) - 1}")
        _export_mask(d, cfg, _load_teacher(Path(tfile.read_text().strip())), val_set, args.scene)
        print(d / "masks" / f"quality_mask_scene{args.scene}.svg")
    return 0


def cmd_example_config(args) -> int:
    print(annotated_example(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="setkd", description="Set-prediction detector distillation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("oracle-check", help="Hungarian solver vs exhaustive search")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--max-size", type=int, default=7, help="rows and columns drawn from 1..N")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle_check)

    s = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--only", choices=list(CHECKS), help="run a single check")
    s.add_argument("--configs", type=int, default=100, help="random configurations per check")
    s.add_argument("--coords", type=int, default=40, help="coordinates sampled per configuration")
    s.set_defaults(func=cmd_grad_check)

    def run_flags(s):
        s.add_argument("--config", help="INI config file (see `setkd example-config`)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default="runs", help="output root (default: runs)")

    s = sub.add_parser("train", help="train the teacher and save its checkpoint")
    run_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("distill", help="student baseline and distilled runs, curves and ablation table")
    run_flags(s)
    s.add_argument("--components", nargs="*", choices=["LD", "FD", "AD"], help="override [distill] components")
    s.add_argument("--train-teacher", action="store_true", help="train the teacher if its checkpoint is missing")
    s.add_argument("--teacher", help="explicit teacher checkpoint path")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("report", help="regenerate plots, table and mask export of a distill run")
    s.add_argument("run", help="distill run directory")
    s.add_argument("--scene", type=int, default=0, help="validation scene for the mask export")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("example-config", help="print an annotated config with every default")
    s.set_defaults(func=cmd_example_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CommandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
