import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import LANDMARKS, affine_displacement

from tled.config import load_config, parse_config
from tled.errors import ConfigError, WarpError
from tled.geometry import load_volume
from tled.pipeline import read_displacement_csv, run_solve, run_warp

class TestConfig:
    def test_example_config_parses(self):
        cfg = load_config("configs/cube_compression.json")
        assert cfg.geometry.length_unit == "mm" and cfg.materials["default"].E == 3000.0

    def test_missing_unit_rejected(self):
        with pytest.raises(ConfigError, match="length_unit"):
            parse_config({"geometry": {"mesh": "m.mesh"}, "materials": {"default": {"stress_unit": "Pa", "E": 1, "nu": 0.3}},
                          "loading": {"length_unit": "m", "ramp_duration_s": 1, "prescribed": [{"file": "a"}]}})

    def test_unknown_key_rejected(self, workspace):
        data = json.loads((workspace / "run.json").read_text())
        data["solver"]["dampnig"] = 1.0
        with pytest.raises(ConfigError, match="dampnig"):
            parse_config(data)

    def test_bad_region_key(self, workspace):
        data = json.loads((workspace / "run.json").read_text())
        data["materials"] = {"brain": data["materials"]["default"]}
        with pytest.raises(ConfigError, match="region number"):
            parse_config(data)

    def test_not_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(tmp_path / "c.json")

    def test_unknown_node_set(self, workspace):
        data = json.loads((workspace / "run.json").read_text())
        data["loading"]["prescribed"] = [{"set": "skull", "displacement": [0, 0, 0]}]
        with pytest.raises(ConfigError, match="skull"):
            run_solve(parse_config(data, workspace), write=False)


class TestSolveWarp:
    def test_affine_solve_is_exact(self, workspace):
        cfg = load_config(workspace / "run.json")
        res = run_solve(cfg)
        assert res.converged
        from tled.geometry import load_mesh

        X = load_mesh(workspace / "cube.mesh").nodes
        assert_allclose(res.displacement * 1e3, affine_displacement(X), atol=1e-4)
        u = read_displacement_csv(res.outputs["displacements"], len(X))
        assert_allclose(u * 1e-3, res.displacement, rtol=1e-12)  # written in the declared mm
        assert json.loads((workspace / "out" / "report.json").read_text())["output_length_unit"] == "mm"

    def test_landmarks_land_within_one_voxel(self, workspace):
        cfg = load_config(workspace / "run.json")
        run_solve(cfg)
        res = run_warp(cfg)
        warped = load_volume(res.volume_path).scalars
        for p in LANDMARKS:
            target = p + affine_displacement(p[None])[0]
            c = np.round(target).astype(int)
            win = warped[c[0] - 3:c[0] + 4, c[1] - 3:c[1] + 4, c[2] - 3:c[2] + 4]
            found = np.array(np.unravel_index(np.argmax(win), win.shape)) + c - 3
            assert np.linalg.norm(found - target) <= 1.0

    def test_frame_mismatch(self, workspace):
        data = json.loads((workspace / "run.json").read_text())
        data["warp"]["mesh_to_image_offset_mm"] = [500.0, 0.0, 0.0]
        cfg = parse_config(data, workspace)
        run_solve(cfg)
        with pytest.raises(WarpError, match="overlap"):
            run_warp(cfg)

    def test_unit_mismatch(self, workspace):
        cfg = load_config(workspace / "run.json")
        run_solve(cfg)
        data = json.loads((workspace / "run.json").read_text())
        data["geometry"]["length_unit"] = "m"
        with pytest.raises(WarpError, match="mm"):
            run_warp(parse_config(data, workspace))

    def test_warp_before_solve(self, workspace):
        with pytest.raises(ConfigError, match="run 'solve' first"):
            run_warp(load_config(workspace / "run.json"))
