import numpy as np
import pytest

from setkd.cli import main
from setkd.gradcheck import CHECKS, run_grad_check

TINY = """[run]
n_train = 24
n_val = 12

[teacher]
d = 8
steps = 30

[student]
d = 4
steps = 20

[train]
n_queries = 6
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_oracle_check_passes(capsys):
    assert main(["oracle-check", "--trials", "200"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_oracle_check_zero_trials_warns(capsys):
    assert main(["oracle-check", "--trials", "0"]) == 0
    assert "warning" in capsys.readouterr().out


def test_grad_check_single_filter(capsys):
    assert main(["grad-check", "--only", "det", "--configs", "10"]) == 0
    out = capsys.readouterr().out
    assert "det " in out and "logits_pos" not in out and "PASS" in out


def test_grad_check_catches_perturbed_gradients():
    res = run_grad_check(only=["feat_vanilla", "assign_kd"], configs=5, perturb=lambda g: 1.001 * g + 1e-3)
    assert not any(r.passed for r in res)
    assert [r.name for r in run_grad_check(only="det", configs=1)] == ["det"]
    with pytest.raises(KeyError):
        run_grad_check(only="nope", configs=1)
    assert set(CHECKS) >= {"det", "logits_pos", "logits_neg", "logits_progressive", "feat_vanilla",
                           "feat_target_aware", "assign_kd", "total", "model_backward"}


def test_distill_without_teacher_is_a_clear_error(tiny, tmp_path, capsys):
    assert main(["distill", "--config", str(tiny), "--seed", "1", "--out", str(tmp_path / "runs")]) == 2
    err = capsys.readouterr().err
    assert "teacher checkpoint" in err and "--train-teacher" in err


def test_seed_is_required(tiny, tmp_path, capsys):
    assert main(["train", "--config", str(tiny), "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nwarmup = 3\n")
    assert main(["train", "--config", str(bad), "--seed", "0"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_train_then_distill_then_report(tiny, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(tiny), "--seed", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# effective configuration") and "seed = 2" in text
    (tdir,) = out.glob("teacher-*-s2")
    assert {p.name for p in tdir.iterdir()} >= {"teacher.npz", "log.csv", "is_curve.csv", "config.ini"}

    assert main(["distill", "--config", str(tiny), "--seed", "2", "--out", str(out), "--components", "LD"]) == 0
    (ddir,) = out.glob("distill-*-s2")
    assert sorted(p.name for p in ddir.iterdir() if p.is_dir()) == ["LD", "masks", "none"]
    table = (ddir / "ablation.csv").read_text().splitlines()
    assert table[0] == "setting,mAP,delta" and table[1].startswith("none,") and table[3] == "FD,absent,absent"
    header = (ddir / "LD" / "log.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,step,loss_total,loss_det,loss_logits,loss_feat,loss_assign,mAP,AP50,mean_IS")
    is_rows = (ddir / "none" / "is_curve.csv").read_text().splitlines()
    assert is_rows[0] == "epoch,mean_IS,IS_1_2,IS_2_3"
    mask = np.loadtxt(ddir / "masks" / "quality_mask_scene0.csv", delimiter=",")
    assert mask.shape == (16, 16) and mask.min() >= 0

    svg = (ddir / "ap_curves.svg").read_bytes()
    (ddir / "ap_curves.svg").unlink()
    assert main(["report", str(ddir), "--scene", "1"]) == 0
    assert (ddir / "ap_curves.svg").read_bytes() == svg
    assert (ddir / "masks" / "quality_mask_scene1.svg").is_file()
    assert main(["report", str(ddir), "--scene", "99"]) == 2
    assert main(["report", str(tmp_path)]) == 2


def test_example_config_prints_every_key(capsys):
    assert main(["example-config"]) == 0
    out = capsys.readouterr().out
    assert "[distill]" in out and "lambda_feat = 20.0" in out
