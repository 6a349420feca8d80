# -*- coding: utf-8 -*-
"""
命令行：配置解析、gen-scene、locate、simulate
"""

import json
import os

import numpy as np
import pytest

from cli.commands import build_parser, main, parse_sweep, resolve_config
from cli.config import RunConfig, config_from_dict, config_schema, with_overrides
from core.errors import ConfigError
from core.measure import NoiseSigmas, measurements_to_dict, perturb, true_observables
from core.scene import generate_box_scene, load_scene_file, save_scene

FAST_CONFIG = {
    "cloud": {"n_rays": 20, "max_bounces": 0, "max_length": 30.0},
    "gmm": {"k_max": 3, "n_init": 1, "max_fit_points": 500},
    "grid": {"spacing": 0.1},
    "sim": {"n_trials": 3, "truth_directions": 2000},
}


@pytest.fixture
def workspace(tmp_path):
    """空场景 + 快速配置文件 + 零噪声测量文件"""
    scene = generate_box_scene()
    scene_path = save_scene(scene, tmp_path / "scene.json")
    config = dict(FAST_CONFIG, scene={"path": scene_path})
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")

    ue = [2.5, 11.0, 1.2]
    truth = true_observables(scene, ue, max_bounces=0)
    meas = perturb(truth, NoiseSigmas(), np.random.default_rng(0))
    data = measurements_to_dict(meas)
    data["ground_truth"] = ue
    meas_path = tmp_path / "meas.json"
    meas_path.write_text(json.dumps(data), encoding="utf-8")
    return {"root": tmp_path, "config": str(config_path), "measurements": str(meas_path), "truth": data}


def _last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


class TestConfig:

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.noise.sigma_eta_deg == 1.0
        assert cfg.grid.spacing == 0.05
        assert cfg.sim.n_trials == 500

    def test_unknown_key_is_rejected(self):
        with pytest.raises(ConfigError, match="cloud.rays"):
            config_from_dict({"cloud": {"rays": 3}})

    def test_wrong_type_is_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"sim": {"n_trials": "many"}})

    def test_range_check(self):
        with pytest.raises(ConfigError):
            config_from_dict({"grid": {"spacing": 0.0}})

    def test_overrides_skip_none(self):
        cfg = with_overrides(RunConfig(), {"seed": 7, "grid.spacing": None, "fusion.mode": "aoa+pt"})
        assert cfg.seed == 7
        assert cfg.grid.spacing == 0.05
        assert cfg.fusion.mode == "aoa+pt"

    def test_schema_lists_sections(self):
        schema = config_schema()
        assert schema["properties"]["seed"]["type"] == "integer"
        assert schema["properties"]["fusion"]["properties"]["reference_bs"]["type"] == ["integer", "null"]


class TestParseSweep:

    def test_degrees_suffix(self):
        assert parse_sweep("sigma_eta=0.25,0.5,1.0deg") == ("sigma_eta", ["0.25", "0.5", "1.0"], [0.25, 0.5, 1.0])

    def test_fusion_values(self):
        axis, labels, values = parse_sweep("fusion=aoa,aoa+pt")
        assert axis == "fusion"
        assert values == ["aoa", "aoa+pt"]

    @pytest.mark.parametrize("text", ["sigma_nu_pt=0.1deg", "n_rays=1,2", "sigma_eta=a,b", "sigma_eta",
                                      "fusion=aoa,music", "sigma_nu_rpt=-1"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_sweep(text)


class TestGenScene:

    def test_default_hall_uses_configured_clutter(self, tmp_path, capsys):
        assert main(["--out", str(tmp_path), "gen-scene"]) == 0
        path = capsys.readouterr().out.strip()
        scene = load_scene_file(path)
        assert len(scene.surfaces) == 12 + RunConfig().scene.clutter * 6
        assert len(scene.base_stations) == 4

    def test_empty_hall(self, tmp_path):
        output = str(tmp_path / "hall.json")
        assert main(["gen-scene", "--clutter", "0", "--output", output]) == 0
        assert len(load_scene_file(output).surfaces) == 12

    def test_clutter_and_size(self, tmp_path):
        output = str(tmp_path / "hall.json")
        assert main(["gen-scene", "--width", "10", "--clutter", "3", "--output", output]) == 0
        scene = load_scene_file(output)
        assert len(scene.surfaces) == 12 + 3 * 6
        assert scene.bbox_max[0] == pytest.approx(10.0)

    def test_config_file_clutter_and_flag_precedence(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"scene": {"clutter": 3}}), encoding="utf-8")
        args = build_parser().parse_args(["--config", str(config_path), "gen-scene"])
        assert resolve_config(args).scene.clutter == 3
        args = build_parser().parse_args(["--config", str(config_path), "gen-scene", "--clutter", "1"])
        assert resolve_config(args).scene.clutter == 1
        args = build_parser().parse_args(["gen-scene"])
        assert resolve_config(args).scene.clutter == RunConfig().scene.clutter

    def test_zero_height(self, tmp_path):
        assert main(["--out", str(tmp_path), "gen-scene", "--height", "0"]) == 1


class TestPrintConfig:

    def test_round_trip(self, capsys):
        assert main(["--seed", "5", "--print-config"]) == 0
        cfg = config_from_dict(json.loads(capsys.readouterr().out))
        assert cfg == with_overrides(RunConfig(), {"seed": 5})

    def test_flags_override_file(self, workspace, capsys):
        assert main(["--config", workspace["config"], "--seed", "9", "--print-config"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["seed"] == 9
        assert data["grid"]["spacing"] == 0.1
        assert data["cloud"]["n_rays"] == 20

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        assert main(["--config", str(bad), "--print-config"]) == 1

    def test_no_command(self):
        assert main([]) == 2


class TestLocate:

    def test_noiseless_file(self, workspace, capsys):
        assert main(["--config", workspace["config"], "locate", workspace["measurements"]]) == 0
        report = _last_json(capsys)
        assert report["fusion"] == "aoa"
        assert report["ground_truth"] == workspace["truth"]["ground_truth"]
        assert report["epsilon_m"] <= 0.2

    def test_dumps(self, workspace, capsys):
        out = str(workspace["root"] / "dump")
        argv = ["--config", workspace["config"], "--out", out, "locate", workspace["measurements"],
                "--dump", "clouds,mixtures,field", "--field-decimation", "4"]
        assert main(argv) == 0
        names = sorted(os.listdir(out))
        assert names == ["cloud_bs0.csv", "cloud_bs1.csv", "cloud_bs2.csv", "cloud_bs3.csv", "field.csv",
                         "mixtures.json"]
        with open(os.path.join(out, "mixtures.json"), encoding="utf-8") as f:
            assert sorted(json.load(f)) == ["0", "1", "2", "3"]

    def test_rpt_mode_without_rpt(self, workspace):
        argv = ["--config", workspace["config"], "locate", workspace["measurements"], "--fusion", "aoa+rpt"]
        assert main(argv) == 1

    def test_unknown_dump_kind(self, workspace):
        argv = ["--config", workspace["config"], "locate", workspace["measurements"], "--dump", "rays"]
        assert main(argv) == 1

    def test_missing_file(self, workspace):
        assert main(["--config", workspace["config"], "locate", str(workspace["root"] / "nope.json")]) == 1


class TestSimulate:

    def _run(self, workspace, out, *extra):
        argv = ["--config", workspace["config"], "--seed", "42", "--out", out, "simulate", *extra]
        return main(argv)

    def test_same_seed_same_files(self, workspace):
        a = str(workspace["root"] / "a")
        b = str(workspace["root"] / "b")
        assert self._run(workspace, a, "--sigma-eta", "1.0") == 0
        assert self._run(workspace, b, "--sigma-eta", "1.0") == 0
        for name in ("cdf.csv", "trials.csv"):
            with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                assert fa.read() == fb.read()
        with open(os.path.join(a, "summary.json"), encoding="utf-8") as f:
            summary = json.load(f)
        assert summary["n_trials"] == 3
        assert summary["config"]["seed"] == 42
        assert summary["config"]["noise"]["sigma_eta_deg"] == 1.0

    def test_sweep_writes_one_set_per_value(self, workspace):
        out = str(workspace["root"] / "sweep")
        assert self._run(workspace, out, "--n-trials", "2", "--sweep", "sigma_eta=0,0.5deg") == 0
        for label in ("0", "0.5"):
            for stem in ("cdf", "trials", "summary"):
                ext = "json" if stem == "summary" else "csv"
                assert os.path.exists(os.path.join(out, f"{stem}_sigma_eta_{label}.{ext}"))
        with open(os.path.join(out, "summary_sigma_eta_0.5.json"), encoding="utf-8") as f:
            assert json.load(f)["config"]["noise"]["sigma_eta_deg"] == 0.5

    def test_bad_sweep(self, workspace):
        assert self._run(workspace, str(workspace["root"] / "x"), "--sweep", "grid=0.1") == 1

    def test_report_flag_writes_pdf(self, workspace):
        out = str(workspace["root"] / "with_report")
        assert self._run(workspace, out, "--n-trials", "2", "--report") == 0
        assert os.path.getsize(os.path.join(out, "report.pdf")) > 0
