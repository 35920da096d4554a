import json
import os

import numpy as np
import pytest

from canopyhm import cli
from canopyhm.raster import RasterGrid, write_raster

TINY_CONFIG = {
    "seed": 7,
    "tile_size": 112,
    "patch_stride": 14,
    "stub_channels": 8,
    "up_factors": [7, 2],
    "n_views": 3,
    "enhancer_steps": 12,
    "enhancer_crop_px": 84,
    "head_epochs": 2,
    "head_crop_px": 84,
    "head_crops_per_tile": 1,
    "h_max": 30.0,
    "scene": {
        "width": 120,
        "height": 120,
        "cell_size_m": 1.0,
        "seed": 7,
        "parcels": [
            {"species": "pinus_tabulaeformis", "stand_age": 8, "spacing_m": 4,
             "mean_height_m": 9, "height_jitter_m": 1, "pos_jitter_m": 1}
        ]
    }
}


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_unknown_subcommand_exits_one_with_usage(capsys):
    code, out, err = run_cli(capsys, "frobnicate")
    assert code == 1
    assert "usage" in err.lower()


def test_no_subcommand_exits_one(capsys):
    code, out, err = run_cli(capsys)
    assert code == 1
    assert "usage" in err.lower()


def test_missing_input_file_exits_one(capsys):
    code, out, err = run_cli(capsys, "eval", "--pred", "/nonexistent/a.rst",
                             "--ref", "/nonexistent/b.rst")
    assert code == 1
    assert "error" in err.lower()


def test_synth_contract(capsys, config_path, tmp_path):
    out_dir = tmp_path / "scene"
    code, out, _ = run_cli(capsys, "synth", "--config", config_path,
                           "--out", str(out_dir))
    assert code == 0
    summary = json.loads(out)
    assert summary["trees"] > 0
    assert (out_dir / "chm.rst").exists()
    assert (out_dir / "rgb.ftr").exists()
    assert (out_dir / "trees.csv").exists()
    assert (out_dir / "parcels.json").exists()


def test_eval_contract(capsys, tmp_path):
    rng = np.random.default_rng(0)
    ref = RasterGrid(rng.uniform(0, 10, size=(20, 20)))
    pred = RasterGrid(ref.values + 1.0)
    write_raster(ref, tmp_path / "r.rst")
    write_raster(pred, tmp_path / "p.rst")
    code, out, _ = run_cli(capsys, "eval", "--pred", str(tmp_path / "p.rst"),
                           "--ref", str(tmp_path / "r.rst"))
    assert code == 0
    summary = json.loads(out)
    assert set(summary) == {"bias", "mae", "rmse", "r2", "n"}
    assert summary["bias"] == pytest.approx(1.0)
    assert summary["mae"] == pytest.approx(1.0)


def test_eval_det_r2_flag(capsys, tmp_path):
    rng = np.random.default_rng(1)
    ref = RasterGrid(rng.uniform(0, 10, size=(10, 10)))
    pred = RasterGrid(ref.values + rng.normal(0, 0.5, size=(10, 10)))
    write_raster(ref, tmp_path / "r.rst")
    write_raster(pred, tmp_path / "p.rst")
    code, out, _ = run_cli(capsys, "eval", "--pred", str(tmp_path / "p.rst"),
                           "--ref", str(tmp_path / "r.rst"), "--det-r2")
    summary = json.loads(out)
    assert "r2_det" in summary


def test_detect_agb_growth_flow(capsys, config_path, tmp_path):
    scene_dir = tmp_path / "scene"
    assert run_cli(capsys, "synth", "--config", config_path,
                   "--out", str(scene_dir))[0] == 0
    det_dir = tmp_path / "det"
    code, out, _ = run_cli(capsys, "detect", "--chm", str(scene_dir / "chm.rst"),
                           "--radius-m", "3", "--min-height-m", "2",
                           "--out", str(det_dir))
    assert code == 0
    assert json.loads(out)["trees"] > 0

    agb_dir = tmp_path / "agb"
    code, out, _ = run_cli(capsys, "agb",
                           "--trees", str(det_dir / "trees_detected.csv"),
                           "--parcels", str(scene_dir / "parcels.json"),
                           "--raster", str(scene_dir / "chm.rst"),
                           "--out", str(agb_dir))
    assert code == 0
    summary = json.loads(out)
    assert summary["total_kg"] > 0
    header = (agb_dir / "parcel_agb.csv").read_text().splitlines()[0]
    assert header == "parcel_id,species,age,count,mean_kg,total_kg"

    series = tmp_path / "series.csv"
    series.write_text("species,year,mean_kg\n"
                      "salix_matsudana,2013,10.0\n"
                      "salix_matsudana,2014,23.0\n"
                      "salix_matsudana,2015,36.2\n"
                      "toona_sinensis,2013,12.0\n"
                      "toona_sinensis,2014,27.2\n")
    growth_dir = tmp_path / "growth"
    code, out, _ = run_cli(capsys, "growth", "--series", str(series),
                           "--out", str(growth_dir))
    assert code == 0
    rates = json.loads(out)["rates"]
    assert rates["salix_matsudana"] == pytest.approx(13.1, abs=0.01)
    assert rates["toona_sinensis"] == pytest.approx(15.2, abs=0.01)


def test_profile_writes_csv_and_svg(capsys, config_path, tmp_path):
    scene_dir = tmp_path / "scene"
    run_cli(capsys, "synth", "--config", config_path, "--out", str(scene_dir))
    prof_dir = tmp_path / "prof"
    code, out, _ = run_cli(capsys, "profile", "--chm", str(scene_dir / "chm.rst"),
                           "--ref", str(scene_dir / "chm.rst"),
                           "--out", str(prof_dir))
    assert code == 0
    summary = json.loads(out)
    assert summary["corr_x"] == pytest.approx(1.0)
    assert (prof_dir / "profile_x.csv").exists()
    assert (prof_dir / "profile_x.svg").exists()
    assert (prof_dir / "profile_y.svg").exists()


def _full_chain(capsys, config_path, root, seed):
    paths = {}
    scene = root / "scene"
    run = root / "run"
    for name in ("lf", "hf", "pred"):
        paths[name] = root / name
    steps = [
        ("synth", ["--config", config_path, "--seed", str(seed), "--out", str(scene)]),
        ("extract", ["--config", config_path, "--rgb", str(scene / "rgb.ftr"),
                     "--out", str(paths["lf"])]),
        ("train-enhancer", ["--config", config_path, "--seed", str(seed),
                            "--rgb", str(scene / "rgb.ftr"), "--out", str(run)]),
        ("enhance", ["--config", config_path, "--features", str(paths["lf"]),
                     "--params", str(run / "enhancer.params"), "--out", str(paths["hf"])]),
        ("train-head", ["--config", config_path, "--seed", str(seed),
                        "--features", str(paths["hf"]), "--ref", str(scene / "chm.rst"),
                        "--out", str(run)]),
        ("infer", ["--config", config_path, "--features", str(paths["hf"]),
                   "--head", str(run / "head.params"), "--out", str(paths["pred"])]),
    ]
    for cmd, argv in steps:
        code, out, err = run_cli(capsys, cmd, *argv)
        assert code == 0, f"{cmd} failed: {err}"
    code, out, _ = run_cli(capsys, "eval",
                           "--pred", str(paths["pred"] / "pred_full.rst"),
                           "--ref", str(scene / "chm.rst"))
    assert code == 0
    return out


def test_full_chain_deterministic(capsys, config_path, tmp_path):
    out1 = _full_chain(capsys, config_path, tmp_path / "run1", seed=7)
    out2 = _full_chain(capsys, config_path, tmp_path / "run2", seed=7)
    assert out1 == out2
    summary = json.loads(out1)
    assert summary["n"] == 112 * 112


def test_report_writes_figures_and_tables(capsys, config_path, tmp_path):
    scene_dir = tmp_path / "scene"
    run_cli(capsys, "synth", "--config", config_path, "--out", str(scene_dir))
    # use the reference itself as the "prediction" to exercise the report path
    rep_dir = tmp_path / "rep"
    code, out, _ = run_cli(capsys, "report",
                           "--pred", str(scene_dir / "chm.rst"),
                           "--ref", str(scene_dir / "chm.rst"),
                           "--parcels", str(scene_dir / "parcels.json"),
                           "--config", config_path,
                           "--out", str(rep_dir))
    assert code == 0
    written = json.loads(out)["written"]
    for name in ("metrics.json", "metrics.csv", "profile_x.svg", "profile_y.svg",
                 "scatter_heights.svg", "agb_report.csv", "agb_scatter.svg"):
        assert name in written
        assert (rep_dir / name).exists()
    metrics = json.loads((rep_dir / "metrics.json").read_text())
    assert metrics["mae"] == pytest.approx(0.0)


def test_config_rejects_unknown_keys(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"tile_sizes": 99}))
    code, _, err = run_cli(capsys, "extract", "--config", str(path),
                           "--rgb", "x.ftr", "--out", str(tmp_path / "o"))
    assert code == 1
    assert "tile_sizes" in err
