"""Acceptance suite: one verdict line per criterion, printed in the summary.

The experiment criteria (4-8, 10) share one module-scoped run of every
setting over seeds 0-4 at the default configuration, which takes a few
minutes per seed on one core.
"""

import time

import numpy as np
import pytest

from setkd.cli import main
from setkd.config import load_config, parse_ini
from setkd.evaluation import ablation_table, table_text
from setkd.experiments import SETTINGS, run_seed
from setkd.geometry import giou, iou, l1_box, to_xyxy, BoxCxCyWh
from setkd.gradcheck import CHECKS, TOLERANCE, run_grad_check
from setkd.oracle import run_oracle_check

SEEDS = (0, 1, 2, 3, 4)
AP_POINT = 0.01  # mAP is stored as a fraction


@pytest.fixture(scope="module")
def runs():
    cfg = load_config(None)
    return [run_seed(cfg, s, list(SETTINGS)) for s in SEEDS]


def _maps(runs, name):
    return np.array([r.final_map(name) for r in runs])


def _fmt(values):
    return "[" + " ".join(f"{100 * v:.2f}" for v in values) + "]"


def test_criterion_01_assignment_oracle(verdict):
    rep = run_oracle_check(trials=1000, max_size=7, seed=0)
    ok = rep.passed and rep.seconds < 5.0
    verdict(1, ok, f"{rep.trials} matrices up to 7x7, {len(rep.mismatches)} mismatches, {rep.seconds:.2f}s (< 5s)")
    assert ok


def test_criterion_02_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_grad_check(seed=0, configs=100)
    seconds = time.perf_counter() - t0
    worst = max(r.worst for r in results)
    ok = {r.name for r in results} == set(CHECKS) and all(r.passed and r.configs >= 100 for r in results)
    ok = ok and seconds < 60.0
    verdict(2, ok, f"{len(results)} checks x 100 configs, worst rel. error {worst:.2e} (<= {TOLERANCE:g}), "
                   f"{seconds:.1f}s (< 60s)")
    assert ok


def test_criterion_03_geometry(verdict):
    rng = np.random.default_rng(0)
    lo = rng.uniform(-1, 1, (20000, 2, 2))
    boxes = np.concatenate([lo, lo + rng.uniform(0.001, 1.5, (20000, 2, 2))], axis=2)
    a, b = boxes[:, 0], boxes[:, 1]
    i_ab, g_ab = iou(a, b), giou(a, b)
    props = (np.all((0 <= i_ab) & (i_ab <= 1)) and np.all((-1 < g_ab) & (g_ab <= 1)) and np.all(g_ab <= i_ab)
             and np.array_equal(i_ab, iou(b, a)) and np.array_equal(g_ab, giou(b, a)))
    worked = [
        (np.abs(np.subtract(to_xyxy(BoxCxCyWh(0.5, 0.5, 0.2, 0.4)), (0.4, 0.3, 0.6, 0.7))).max(), "to_xyxy"),
        (abs(iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) - 1 / 3), "iou 1/3"),
        (abs(giou((0, 0, 1, 1), (1, 0, 2, 1)) - 0.0), "giou 0"),
        (abs(giou((0, 0, 1, 1), (2, 0, 3, 1)) + 1 / 3), "giou -1/3"),
        (abs(l1_box((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.4)) - 0.3), "l1 0.3"),
    ]
    err = max(e for e, _ in worked)
    ok = bool(props) and err <= 1e-12
    verdict(3, ok, f"bounds/symmetry/giou<=iou on 20000 pairs: {bool(props)}; "
                   f"worked values max error {err:.1e} (<= 1e-12)")
    assert ok


@pytest.mark.slow
def test_criterion_04_distillation_effect(runs, verdict):
    base, full = _maps(runs, "none"), _maps(runs, "LD+FD+AD")
    wins = int(np.sum(full - base >= 1.0 * AP_POINT))
    cpu = sum(r.cpu["teacher"] + r.cpu["knowledge"] + r.cpu["none"] + r.cpu["LD+FD+AD"] for r in runs)
    ok = wins >= 4 and cpu < 600.0
    verdict(4, ok, f"full KD - baseline (AP) {_fmt(full - base)}; >= +1.0 in {wins}/5 (need 4); "
                   f"teacher+baseline+full CPU {cpu:.0f}s (< 600s)")
    assert ok


@pytest.mark.slow
def test_criterion_05_component_ordering(runs, verdict, capsys):
    base = _maps(runs, "none")
    full_ok = bool(np.all(_maps(runs, "LD+FD+AD") >= base))
    singles = {c: int(np.sum(_maps(runs, c) >= base - 0.3 * AP_POINT)) for c in ("LD", "FD", "AD")}
    ok = full_ok and all(v >= 4 for v in singles.values())
    mean = {name: float(_maps(runs, name).mean()) for name in ("none", "LD", "FD", "AD", "LD+FD", "LD+FD+AD")}
    with capsys.disabled():
        print("\nablation table, mean over seeds 0-4:\n" + table_text(ablation_table(mean)), end="")
    verdict(5, ok, f"full >= baseline in all seeds: {full_ok}; single >= baseline-0.3 count "
                   + ", ".join(f"{c} {v}/5" for c, v in singles.items()) + " (need 4 each)")
    assert ok


@pytest.mark.slow
def test_criterion_06_instability(runs, verdict):
    ad = np.array([r.is_after_first_epoch("AD") for r in runs])
    base = np.array([r.is_after_first_epoch("none") for r in runs])
    teacher = np.array([float(r.teacher.log[-1]["mean_IS"]) for r in runs])
    untrained = np.array([float(r.students["none"].log[0]["mean_IS"]) for r in runs])
    wins = int(np.sum(ad < base))
    teacher_ok = bool(np.all(teacher < untrained))
    ok = wins >= 4 and teacher_ok
    verdict(6, ok, f"IS after epoch 1, AD {np.round(ad, 3).tolist()} vs baseline {np.round(base, 3).tolist()}: "
                   f"lower in {wins}/5 (need 4); teacher {np.round(teacher, 3).tolist()} < untrained "
                   f"{np.round(untrained, 3).tolist()} in all: {teacher_ok}")
    assert ok


@pytest.mark.slow
def test_criterion_07_feature_weighting(runs, verdict):
    ta, van = _maps(runs, "FD"), _maps(runs, "FD-vanilla")
    wins = int(np.sum(ta >= van))
    verdict(7, wins >= 4, f"target-aware {_fmt(ta)} vs mean-mask {_fmt(van)}: >= in {wins}/5 (need 4)")
    assert wins >= 4


@pytest.mark.slow
def test_criterion_08_negative_locations(runs, verdict):
    full, pos = _maps(runs, "LD"), _maps(runs, "LD-pos-only")
    wins = int(np.sum(full >= pos))
    verdict(8, wins >= 3, f"LD pos+neg {_fmt(full)} vs pos-only {_fmt(pos)}: >= in {wins}/5 (need 3)")
    assert wins >= 3


def test_criterion_09_determinism(tmp_path, verdict):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text("[run]\nn_train = 40\nn_val = 20\nablation = true\n\n[teacher]\nsteps = 60\n\n"
                   "[student]\nsteps = 40\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["distill", "--config", str(cfg), "--seed", "3", "--out", str(o), "--train-teacher"])
             for o in outs]
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
    same = [(outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files]
    ok = codes == [0, 0] and len(files) >= 14 and all(same) and \
        sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*.csv")) == files
    verdict(9, ok, f"two independent distill runs: {sum(same)}/{len(files)} CSV files byte-identical")
    assert ok


@pytest.mark.slow
def test_criterion_10_progressive(runs, verdict):
    switch = parse_ini("[distill]\nprogressive = false\n").distill().progressive is False
    prog, last = _maps(runs, "LD"), _maps(runs, "LD-last-stage")
    wins = int(np.sum(prog >= last))
    ok = switch and wins >= 3
    verdict(10, ok, f"progressive {_fmt(prog)} vs last-stage {_fmt(last)}: >= in {wins}/5 (need 3); "
                    f"config switch distill.progressive works: {switch}")
    assert ok
