import json

import numpy as np
import pytest
from PIL import Image

from ncssdu import datastore
from ncssdu.cli import main

SMALL = {"grid": [32, 32], "coils": 4, "tes": [5.0, 25.0], "epochs": 1, "unroll_count": 2,
         "df_iterations": 3, "depth": 3, "width": 8, "volumes": 40, "blocks": 1,
         "center_retained": 16, "snr": 0}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))

    def run(*args):
        return main([*args, "--config", str(cfg)])

    assert run("simulate", "--out", str(root / "sim"), "--seed", "3") == 0
    return root, run


def test_pipeline_emits_nrmse_json(work, capsys):
    root, run = work
    assert run("masks", "--in", str(root / "sim"), "--out", str(root / "masks")) == 0
    assert run("train-ssdu", "--in", str(root / "sim"), "--masks", str(root / "masks"),
               "--out", str(root / "model")) == 0
    assert run("recon-pddl", "--in", str(root / "sim"), "--model", str(root / "model"),
               "--out", str(root / "recon")) == 0
    capsys.readouterr()
    assert run("report", "--in", str(root / "recon"), "--ref", str(root / "sim"),
               "--out", str(root / "rep")) == 0
    summary = json.loads(capsys.readouterr().out)
    assert np.isfinite(summary["nrmse"]) and len(summary["per_echo_nrmse"]) == 2
    assert (root / "rep" / "montage.png").exists()


def test_full_gridding_matches_baseline_quality(work):
    root, run = work
    assert run("recon-grid", "--in", str(root / "sim"), "--rate", "1",
               "--out", str(root / "g1")) == 0
    recon = datastore.load_array(str(root / "g1"), "recon")
    truth = datastore.load_array(str(root / "sim"), "truth")
    err = np.linalg.norm(np.abs(recon) - np.abs(truth)) / np.linalg.norm(truth)
    assert err <= 0.05


def test_report_on_zero_image(work, tmp_path, capsys):
    _, run = work
    datastore.save(str(tmp_path / "zero"), {"recon": np.zeros((2, 8, 8), np.complex128)})
    capsys.readouterr()
    assert run("report", "--in", str(tmp_path / "zero"), "--out", str(tmp_path / "rep")) == 0
    assert json.loads(capsys.readouterr().out)["nrmse"] == 0.0
    png = np.asarray(Image.open(tmp_path / "rep" / "montage.png"))
    assert png.max() == 0


def test_missing_array_is_named(work, tmp_path, capsys):
    _, run = work
    datastore.save(str(tmp_path / "bare"), {"something": np.zeros(3)})
    assert run("recon-grid", "--in", str(tmp_path / "bare"), "--out", str(tmp_path / "o")) == 2
    assert "missing input" in capsys.readouterr().err


def test_missing_store(work, tmp_path):
    _, run = work
    assert run("recon-grid", "--in", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")) == 2


def test_cgsense_residuals_recorded(work):
    root, run = work
    assert run("recon-cgsense", "--in", str(root / "sim"), "--iterations", "5",
               "--out", str(root / "cg")) == 0
    res = datastore.load_array(str(root / "cg"), "residuals")
    assert res.size >= 1 and np.all(np.isfinite(res))


def test_bold_on_gridding(work, capsys):
    root, run = work
    assert run("fmri-sim", "--out", str(root / "fmri"), "--seed", "4") == 0
    assert run("bold", "--in", str(root / "fmri"), "--method", "grid",
               "--out", str(root / "bold")) == 0
    t = datastore.load_array(str(root / "bold"), "t")
    assert t.shape == (32, 32)
    assert run("bold", "--in", str(root / "fmri"), "--out", str(root / "b2")) == 1
    assert "--model" in capsys.readouterr().err


def test_idempotent_outputs(work, tmp_path):
    root, run = work
    for name in ("a", "b"):
        assert run("recon-grid", "--in", str(root / "sim"), "--out", str(tmp_path / name)) == 0
    a = datastore.load_array(str(tmp_path / "a"), "recon")
    b = datastore.load_array(str(tmp_path / "b"), "recon")
    assert np.array_equal(a, b)
