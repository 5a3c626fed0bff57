import csv
import json
import subprocess
import sys

import pytest

from mesofix.cli import (
    EXIT_CONFIG,
    EXIT_INPUT,
    EXIT_VOXELIZATION,
    ConfigError,
    RunConfig,
    _parser,
    build_config,
    main,
)
from mesofix.correct import open_model
from mesofix.primitives import box, finned_cylinder, hollow_sphere
from mesofix.raster import StructuringElement
from mesofix.volume import TriangleMesh, load_mesh, save_mesh, voxelize


@pytest.fixture
def cube_stl(tmp_path):
    path = tmp_path / "cube.stl"
    save_mesh(box((6, 6, 6)), path)
    return path


def files(folder):
    return sorted(p.name for p in folder.iterdir())


class TestCorrect:
    def test_cube(self, tmp_path, cube_stl):
        out = tmp_path / "fixed.stl"
        assert main(["correct", str(cube_stl), "-o", str(out), "-d", "1", "--layer-height", "0.5"]) == 0
        report = json.loads((tmp_path / "fixed.report.json").read_text())
        # objective equals the boundary-band change of the plain opening
        f = StructuringElement.from_diameter(1.0, 0.5)
        v = voxelize(box((6, 6, 6)), 0.5, 0.5, f.radius_px + 1)
        base = open_model(v, f)
        band = sum(a.count() - b.count() for a, b in zip(v, base))
        assert report["totals"]["objective"] == band
        assert report["parameters"]["config"]["min_feature_diameter_mm"] == 1.0
        assert report["parameters"]["voxelization"]["watertight"] is True
        mesh = load_mesh(out)
        assert mesh.vertices.min(axis=0) == pytest.approx([0, 0, 0], abs=0.5)

    def test_hollow_sphere(self, tmp_path):
        src = tmp_path / "shell.stl"
        save_mesh(hollow_sphere(5, 1.0, rings=32, segments=64), src)
        out = tmp_path / "shell_fixed.obj"
        rc = main(
            ["correct", str(src), "-o", str(out), "-d", "1.2", "--layer-height", "0.25", "--pitch", "0.2",
             "--report", str(tmp_path / "r.json"), "--diff-meshes", "--verify"]
        )
        assert rc == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["totals"]["added_vox"] > 0
        assert all(layer["added"] + layer["removed"] >= 0 for layer in report["layers"])
        assert (tmp_path / "shell_fixed.added.stl").exists()
        assert out.read_text().startswith("v ")

    def test_slice_dump(self, tmp_path, cube_stl):
        dump = tmp_path / "slices"
        rc = main(
            ["correct", str(cube_stl), "-o", str(tmp_path / "o.stl"), "-d", "1", "--layer-height", "1",
             "--dump-slices", str(dump)]
        )
        assert rc == 0
        names = files(dump)
        assert names[0] == "corrected_00000.pgm" and "input_00005.pgm" in names and len(names) == 12
        assert (dump / "input_00000.pgm").read_bytes().startswith(b"P5\n")

    def test_missing_input(self, tmp_path):
        out = tmp_path / "o.stl"
        rc = main(["correct", str(tmp_path / "nope.stl"), "-o", str(out), "-d", "1", "--layer-height", "0.5"])
        assert rc == EXIT_INPUT
        assert files(tmp_path) == []

    def test_garbage_input(self, tmp_path):
        bad = tmp_path / "bad.stl"
        bad.write_bytes(b"\x00" * 90)
        rc = main(["correct", str(bad), "-o", str(tmp_path / "o.stl"), "-d", "1", "--layer-height", "0.5"])
        assert rc == EXIT_INPUT and files(tmp_path) == ["bad.stl"]

    def test_degenerate_voxelization(self, tmp_path):
        flat = tmp_path / "flat.stl"
        save_mesh(TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]), flat)
        rc = main(["correct", str(flat), "-o", str(tmp_path / "o.stl"), "-d", "1", "--layer-height", "0.5"])
        assert rc == EXIT_VOXELIZATION

    @pytest.mark.parametrize(
        "extra",
        [
            ["-d", "0"],
            ["-d", "-1"],
            ["--theta1", "2.0"],
            ["--threads", "0"],
            ["--optimize", "--theta1", "0.1"],
        ],
    )
    def test_config_errors(self, tmp_path, cube_stl, extra):
        args = ["correct", str(cube_stl), "-o", str(tmp_path / "o.stl"), "--layer-height", "0.5"]
        if "-d" not in extra:
            args += ["-d", "1"]
        assert main(args + extra) == EXIT_CONFIG
        assert not (tmp_path / "o.stl").exists()

    def test_missing_required(self, cube_stl):
        assert main(["correct", str(cube_stl), "-d", "1", "--layer-height", "0.5"]) == EXIT_CONFIG
        assert main(["correct", str(cube_stl), "-o", "x.stl", "-d", "1"]) == EXIT_CONFIG

    def test_byte_identical_reruns_and_threads(self, tmp_path, cube_stl):
        outputs = []
        for i, threads in enumerate(["1", "1", "3"]):
            out = tmp_path / f"run{i}.stl"
            rc = main(
                ["correct", str(cube_stl), "-o", str(out), "-d", "1.5", "--layer-height", "0.5",
                 "--theta1", "0.3", "--theta2", "0.7", "--threads", threads]
            )
            assert rc == 0
            outputs.append((out.read_bytes(), (tmp_path / f"run{i}.report.json").read_bytes()))
        assert outputs[0] == outputs[1]
        assert outputs[0][0] == outputs[2][0]
        strip = lambda b: {k: v for k, v in json.loads(b).items() if k != "parameters"}
        assert strip(outputs[0][1]) == strip(outputs[2][1])


class TestConfig:
    def test_toml_and_override(self, tmp_path, cube_stl):
        cfg = tmp_path / "run.toml"
        cfg.write_text('min_feature_diameter_mm = 2.0\nlayer_height_mm = 0.5\nseed = 4\n')
        rc = main(["correct", str(cube_stl), "--config", str(cfg), "-o", str(tmp_path / "o.stl"), "-d", "1.0"])
        assert rc == 0
        p = json.loads((tmp_path / "o.report.json").read_text())["parameters"]
        assert p["min_feature_diameter_mm"] == 1.0 and p["config"]["seed"] == 4
        assert p["config"]["layer_height_mm"] == 0.5

    def test_unknown_key(self, tmp_path, cube_stl):
        cfg = tmp_path / "run.toml"
        cfg.write_text("layer_hieght_mm = 0.5\n")
        assert main(["correct", str(cube_stl), "--config", str(cfg), "-o", "o.stl", "-d", "1"]) == EXIT_CONFIG

    def test_bad_toml(self, tmp_path, cube_stl):
        cfg = tmp_path / "run.toml"
        cfg.write_text("layer_height_mm = = 0.5\n")
        assert main(["correct", str(cube_stl), "--config", str(cfg), "-o", "o.stl", "-d", "1"]) == EXIT_CONFIG

    def test_threads_env(self, cube_stl, monkeypatch):
        argv = ["correct", str(cube_stl), "-o", "o.stl", "-d", "1", "--layer-height", "1"]
        monkeypatch.setenv("MESOFIX_THREADS", "3")
        assert build_config(_parser().parse_args(argv)).threads == 3
        assert build_config(_parser().parse_args(argv + ["--threads", "2"])).threads == 2
        monkeypatch.setenv("MESOFIX_THREADS", "zero")
        with pytest.raises(ConfigError):
            build_config(_parser().parse_args(argv))
        assert build_config(_parser().parse_args(argv + ["--threads", "2"])).threads == 2

    def test_provenance_skips_paths(self):
        prov = RunConfig(input="a.stl", output="b.stl", threads=8).provenance()
        assert "output" not in prov and "threads" not in prov and prov["input"] == "a.stl"


class TestAnalyze:
    def test_cube_json(self, tmp_path, cube_stl):
        out = tmp_path / "sizes.json"
        assert main(["analyze", str(cube_stl), "--layer-height", "0.5", "-o", str(out), "--clamp-max", "10"]) == 0
        d = json.loads(out.read_text())
        assert d["schema"] == "mesofix.element_sizes/1"
        for layer in d["layers"]:
            # a 6 mm square at 0.5 mm pixels is 12 px across
            assert abs(layer["raw_mm"] - 6.0) <= 2 * 0.5
            assert layer["clamped_mm"] == layer["raw_mm"]

    def test_csv_and_clamp(self, tmp_path, cube_stl):
        out = tmp_path / "sizes.csv"
        rc = main(["analyze", str(cube_stl), "--layer-height", "0.5", "-o", str(out),
                   "--clamp-min", "0.6", "--clamp-max", "1.2"])
        assert rc == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 12 and all(float(r["clamped_mm"]) == 1.2 for r in rows)

    def test_stdout(self, cube_stl, capsys):
        assert main(["analyze", str(cube_stl), "--layer-height", "1"]) == 0
        assert json.loads(capsys.readouterr().out)["parameters"]["clamp_mm"] == [0.6, 1.2]

    def test_bad_clamp(self, cube_stl):
        assert main(["analyze", str(cube_stl), "--layer-height", "1", "--clamp-min", "2", "--clamp-max", "1"]) == 2


class TestOrient:
    @pytest.fixture
    def fins(self, tmp_path):
        path = tmp_path / "fins.stl"
        save_mesh(finned_cylinder(length=8.0, axis="y"), path)
        return path

    def run_orient(self, tmp_path, fins, tag, *extra):
        trace, summary = tmp_path / f"{tag}.csv", tmp_path / f"{tag}.json"
        rc = main(["orient", str(fins), "-d", "1.2", "--layer-height", "0.4", "--trace", str(trace),
                   "--summary", str(summary), "--seed", "7", *extra])
        assert rc == 0
        return trace.read_text(), json.loads(summary.read_text())

    def test_one_iteration(self, tmp_path, fins):
        trace, summary = self.run_orient(tmp_path, fins, "a", "--max-iterations", "1")
        assert len(trace.strip().splitlines()) == 2
        assert summary["iterations"] == 1 and summary["provenance"]["seed"] == 7

    def test_reproducible(self, tmp_path, fins):
        a = self.run_orient(tmp_path, fins, "a", "--max-iterations", "4")
        b = self.run_orient(tmp_path, fins, "b", "--max-iterations", "4")
        assert a[0] == b[0]
        drop = lambda s: {k: v for k, v in s.items() if k != "timing"}
        assert drop(a[1]) == drop(b[1])

    def test_coarse_search_reports_full_resolution(self, tmp_path, fins):
        _, summary = self.run_orient(tmp_path, fins, "c", "--max-iterations", "2", "--coarse-pitch", "0.8")
        full = summary["full_resolution"]
        assert full["initial_objective"] > 0 and summary["config"]["eval_pitch"] == 0.8

    def test_chains_into_correct(self, tmp_path, fins):
        out = tmp_path / "best.stl"
        self.run_orient(tmp_path, fins, "d", "--max-iterations", "2", "-o", str(out))
        report = json.loads((tmp_path / "best.report.json").read_text())
        assert report["parameters"]["search"]["iterations"] == 2
        assert report["parameters"]["orientation"] == report["parameters"]["search"]["optimized_theta"]

    def test_needs_an_output(self, fins):
        assert main(["orient", str(fins), "-d", "1.2", "--layer-height", "0.4"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path, cube_stl):
    proc = subprocess.run(
        [sys.executable, "-m", "mesofix", "correct", str(cube_stl), "-o", str(tmp_path / "x.stl"),
         "-d", "1", "--layer-height", "1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "mesofix", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "correct" in proc.stdout
