import json

import numpy as np
import pytest

from glint.cli import main
from glint.hierarchy import load_cache
from glint.imgio import read_pfm


@pytest.fixture(scope="module")
def mapfile(tmp_path_factory):
    path = tmp_path_factory.mktemp("maps") / "iso.pfm"
    assert main(["synth", "--kind", "isotropic", "--size", "64", "--seed", "4", "--out", str(path)]) == 0
    return path


def run_json(capsys, argv):
    code = main(argv)
    return code, json.loads(capsys.readouterr().out)


def test_build_reports_and_caches(tmp_path, capsys, mapfile):
    out = tmp_path / "m.pnmh"
    code, rep = run_json(capsys, ["build", "--map", str(mapfile), "--out", str(out)])
    assert code == 0 and rep["levels"] == 7
    assert rep["nodes"] == sum(64 * 64 >> (2 * l) for l in range(7))
    assert load_cache(out).depth == 6
    again = tmp_path / "m2.pnmh"
    run_json(capsys, ["build", "--map", str(mapfile), "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_build_raw_jacobian_weights_flag(tmp_path, capsys, mapfile):
    out = tmp_path / "raw.pnmh"
    code, _ = run_json(capsys, ["build", "--map", str(mapfile), "--out", str(out),
                                "--raw-jacobian-weights"])
    assert code == 0
    assert not load_cache(out).clamp_weights


def test_ndf_tau_zero_equals_no_hierarchy(tmp_path, mapfile):
    common = ["ndf", "--map", str(mapfile), "--at", "30.5,17.25", "--footprint", "12,9", "--grid", "64"]
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    assert main(common + ["--tau", "0", "--out", str(a)]) == 0
    assert main(common + ["--no-hier", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_pfm(a).data.sum() > 0


def test_config_file_and_flag_override(tmp_path, mapfile):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"map": str(mapfile), "at": [10, 10], "footprint": [3, 3],
                               "grid": 16, "kernel": "box"}))
    out = tmp_path / "n.pfm"
    assert main(["ndf", "--config", str(cfg), "--grid", "32", "--out", str(out)]) == 0
    assert read_pfm(out).width == 32


def test_oracle_compare_schema(tmp_path, capsys, mapfile):
    code, rep = run_json(capsys, ["oracle-compare", "--map", str(mapfile), "--at", "20,20",
                                  "--footprint", "4,4", "--grid", "32", "--count", "200000",
                                  "--seed", "3", "--out", str(tmp_path / "cmp")])
    assert set(rep) == {"l1_rel", "bins_compared", "seed"} and rep["seed"] == 3
    assert code == (0 if rep["l1_rel"] < 0.05 else 1)
    assert (tmp_path / "cmp_eval.pfm").exists() and (tmp_path / "cmp_oracle.pfm").exists()
    code, _ = run_json(capsys, ["oracle-compare", "--map", str(mapfile), "--at", "20,20",
                                "--footprint", "4,4", "--grid", "32", "--count", "20000",
                                "--threshold", "1e-9"])
    assert code == 1


def test_bench_schema(capsys, mapfile):
    code, rep = run_json(capsys, ["bench", "--map", str(mapfile), "--queries", "2"])
    assert code == 0
    assert [s["footprint"] for s in rep["scales"]] == ["64x64", "128x128", "256x256"]
    for s in rep["scales"]:
        assert s["mean_candidates"] <= s["mean_candidates_tau0"]


def test_sample_area_fit(tmp_path, capsys, mapfile):
    q = ["--map", str(mapfile), "--at", "20,20", "--footprint", "4,4"]
    npy = tmp_path / "s.npy"
    assert main(["sample"] + q + ["--count", "100", "--seed", "1", "--out", str(npy)]) == 0
    first = np.load(npy)
    assert main(["sample"] + q + ["--count", "100", "--seed", "1", "--out", str(npy)]) == 0
    assert np.array_equal(first, np.load(npy)) and first.shape == (100, 2)
    area = tmp_path / "a.pfm"
    assert main(["area"] + q + ["--omega-grid", "16", "--out", str(area)]) == 0
    img = read_pfm(area).data[..., 0]
    assert img.max() <= 1.0 + 1e-6 and img[8, 8] > 0.9
    ggx = tmp_path / "m.ggx"
    code, rep = run_json(capsys, ["fit-ggx", "--map", str(mapfile), "--out", str(ggx)])
    assert code == 0 and rep["levels"][0] == 2
    area2 = tmp_path / "g.pfm"
    assert main(["area"] + q + ["--mode", "ggx", "--ggx", str(ggx), "--omega-grid", "16",
                                "--out", str(area2)]) == 0


def test_render_command(tmp_path, mapfile):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({
        "camera": {"position": [0.125, 0.125, 0.5], "look_at": [0.125, 0.125, 0.0], "fov": 20,
                   "width": 6, "height": 4},
        "light": {"direction": [0.2, 0.1, 1.0], "angle": 5.0},
        "material": {"type": "specular", "f0": 0.9},
        "map": str(mapfile), "spp": 2}))
    out, png = tmp_path / "r.pfm", tmp_path / "r.png"
    assert main(["render", "--scene", str(scene), "--out", str(out), "--png", str(png)]) == 0
    img = read_pfm(out)
    assert (img.width, img.height, img.channels) == (6, 4, 3) and png.exists()


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert main(["build", "--map", str(tmp_path / "nope.pfm"), "--out", str(tmp_path / "x")]) == 2
    assert main(["ndf", "--map", str(tmp_path / "nope.pfm")]) == 2
    assert main(["render", "--scene", str(tmp_path / "nope.json"), "--out", "x.pfm"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
