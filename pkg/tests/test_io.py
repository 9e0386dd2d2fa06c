import numpy as np
import pytest

from setkd.config import ConfigError, RunConfig, annotated_example, load_config, parse_ini
from setkd.report import csv_text, heatmap_svg, line_chart_svg, mask_csv, read_csv, write_csv
from setkd.serialize import FormatError, load_dataset, load_params, load_tensors, save_dataset, save_params, save_tensors
from setkd.toy.model import init_params
from setkd.toy.scenes import make_dataset

ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]


def test_params_round_trip(tmp_path):
    p = init_params(4, 3, 2, np.random.default_rng(0))
    path = save_params(tmp_path / "m.npz", p, {"seed": 3})
    q, meta = load_params(path)
    assert meta == {"kind": "params", "seed": 3}
    assert sorted(q) == sorted(p)
    for k in p:
        assert q[k].dtype == np.float64 and np.array_equal(q[k], p[k])


def test_dataset_round_trip(tmp_path):
    ds = make_dataset(5, 9)
    back = load_dataset(save_dataset(tmp_path / "d.npz", ds))
    assert back.seed == 9 and np.array_equal(back.grids, ds.grids)
    for a, b in zip(ds.scenes, back.scenes):
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.boxes, b.boxes)


def test_members_are_little_endian(tmp_path):
    path = save_tensors(tmp_path / "t.npz", {"a": np.arange(3, dtype=">i4"), "b": np.ones(2, dtype=">f4")})
    with np.load(path) as z:
        assert z["a"].dtype == np.dtype("<i8") and z["b"].dtype == np.dtype("<f8")
        assert z["__format__"].tolist() == [1]


def test_format_errors(tmp_path):
    np.savez(tmp_path / "raw.npz", a=np.ones(2))
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "raw.npz")
    with pytest.raises(FormatError):
        save_tensors(tmp_path / "x.npz", {"__meta__": np.ones(1)})
    save_tensors(tmp_path / "other.npz", {"a": np.ones(1)}, {"kind": "dataset"})
    with pytest.raises(FormatError):
        load_params(tmp_path / "other.npz")


def test_defaults_and_example_file_agree():
    cfg = load_config(ROOT / "configs" / "default.ini")
    assert cfg.to_ini() == RunConfig().to_ini()
    assert parse_ini(annotated_example()).values == RunConfig().values
    assert cfg["distill.lambda_feat"] == 20.0 and cfg["distill.gamma"] == 0.5
    assert cfg["distill.components"] == ("LD", "FD", "AD")


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_ini("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_ini("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError):
        parse_ini("[distill]\ncomponents = LD XX\n")
    with pytest.raises(ConfigError):
        parse_ini("[student]\nn_stages = 4\n")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_components_and_switches():
    cfg = parse_ini("[distill]\ncomponents = AD, LD\nprogressive = false\nneg_reg = no\n")
    assert cfg["distill.components"] == ("LD", "AD")
    dc = cfg.distill()
    assert not dc.progressive and not dc.neg_reg
    assert parse_ini("[distill]\ncomponents = none\n")["distill.components"] == ()
    tc = cfg.train_config("student", 4)
    assert tc.seed == 4 and tc.d == 16 and tc.steps == 2000 and tc.distill.components == {"LD", "AD"}
    assert cfg.train_config("teacher", 4).distill.components == frozenset()


def test_digest_ignores_seed_only():
    a = RunConfig()
    assert a.digest() == a.replace(**{"run.seed": 7}).digest()
    assert a.digest() != a.replace(**{"train.lr": 0.01}).digest()
    assert a.digest(("teacher",)) == a.replace(**{"student.d": 8}).digest(("teacher",))


def test_csv_round_trip(tmp_path):
    rows = [{"epoch": 0, "mAP": "0.1"}, {"epoch": 1, "mAP": "0.2"}]
    path = write_csv(tmp_path / "x.csv", rows, ["epoch", "mAP"])
    assert path.read_bytes() == b"epoch,mAP\n0,0.1\n1,0.2\n"
    assert read_csv(path) == [{"epoch": "0", "mAP": "0.1"}, {"epoch": "1", "mAP": "0.2"}]
    assert csv_text([], ["a"]) == "a\n"


def test_svgs_are_deterministic():
    series = {"none": ([0, 1, 2], [0.0, 0.1, 0.15]), "LD+FD+AD": ([0, 1, 2], [0.0, 0.12, 0.2])}
    a = line_chart_svg(series, "AP", "epoch", "mAP")
    assert a == line_chart_svg(series, "AP", "epoch", "mAP")
    assert a.startswith("<svg") and a.count("<polyline") == 2 and "LD+FD+AD" in a
    h = heatmap_svg(np.arange(6.0).reshape(2, 3), "mask")
    assert h.count("<rect") == 7
    assert mask_csv(np.array([[0.5, 1.0]])) == "0.500000,1.000000\n"
