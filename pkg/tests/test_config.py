"""
Tests for Configuration loading and validation
"""

import json

import pytest
from src.stereo_calib.config import Configuration
from src.stereo_calib.errors import ConfigurationError


class TestConfiguration:
    """Test cases for Configuration class"""

    def test_configuration_default_values(self):
        """Test configuration with default values"""
        config = Configuration()

        # Tracking
        assert config.d_thd == 3.0
        assert config.min_points is None
        assert config.max_traversal_offset == 3

        # Trajectory initialization
        assert config.dt_thd == 0.1
        assert config.n_thd == 50
        assert config.knot_spacing_rot == config.knot_spacing_pos == 0.05

        # Time offset
        assert config.offset_bound == 0.15
        assert config.offset_grid_step == 0.001
        assert config.ba_offset_window == 0.01

        # Solver
        assert config.huber_delta == 1.0
        assert config.max_iterations == 100

    def test_defaults_are_valid(self):
        """Test the defaults pass validation"""
        assert Configuration().validate() == Configuration()

    @pytest.mark.parametrize(
        "field, value",
        [
            ("d_thd", 0.0),
            ("dt_thd", -0.1),
            ("knot_spacing_pos", 0),
            ("huber_delta", True),
            ("function_tolerance", "small"),
            ("n_thd", -1),
            ("n_thd", 2.5),
            ("max_traversal_offset", 1),
            ("max_iterations", 0),
            ("min_points", 0),
            ("min_points", False),
            ("reference_camera", ""),
            ("reference_camera", 3),
        ],
    )
    def test_invalid_values(self, field, value):
        """Test every out-of-range value is rejected"""
        with pytest.raises(ConfigurationError, match=field):
            Configuration(**{field: value}).validate()

    def test_offset_window_within_bound(self):
        """Test the grid step and the refinement window fit inside the offset bound"""
        with pytest.raises(ConfigurationError, match="offset_grid_step"):
            Configuration(offset_bound=0.01, offset_grid_step=0.02).validate()
        with pytest.raises(ConfigurationError, match="ba_offset_window"):
            Configuration(offset_bound=0.005).validate()

    def test_solver_options(self):
        """Test solver options carry the configured tolerances"""
        config = Configuration(
            max_iterations=7, function_tolerance=1e-6, spline_fit_max_iterations=9
        )
        assert config.solver_options().max_iterations == 7
        assert config.solver_options().function_tolerance == 1e-6
        assert config.spline_fit_options().max_iterations == 9
        assert config.spline_fit_options().function_tolerance == config.spline_fit_tolerance

    def test_dict_roundtrip(self):
        """Test to_dict feeds back into from_dict"""
        config = Configuration(n_thd=20, min_points=6)
        assert Configuration.from_dict(config.to_dict()) == config

    def test_unknown_keys(self):
        """Test unknown keys are named in the error"""
        with pytest.raises(ConfigurationError, match="knot_spacing"):
            Configuration.from_dict({"knot_spacing": 0.1}, "test.json")

    def test_not_an_object(self):
        """Test the top level must be a mapping"""
        with pytest.raises(ConfigurationError, match="JSON object"):
            Configuration.from_dict([1, 2])


class TestConfigurationFile:
    """Test cases for JSON configuration files"""

    def test_no_path_gives_defaults(self):
        """Test loading without a file"""
        assert Configuration.from_file(None) == Configuration()

    def test_partial_file(self, tmp_path):
        """Test keys missing from the file keep their defaults"""
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"huber_delta": 2.0, "n_thd": 10}), encoding="utf-8")
        config = Configuration.from_file(path)
        assert config.huber_delta == 2.0
        assert config.n_thd == 10
        assert config.d_thd == 3.0

    def test_missing_file(self, tmp_path):
        """Test an unreadable file"""
        with pytest.raises(ConfigurationError, match="cannot read"):
            Configuration.from_file(tmp_path / "missing.json")

    def test_invalid_json(self, tmp_path):
        """Test JSON errors report the line"""
        path = tmp_path / "config.json"
        path.write_text('{\n  "d_thd": 3.0\n  "n_thd": 5\n}\n', encoding="utf-8")
        with pytest.raises(ConfigurationError, match=r"config\.json:3: invalid JSON"):
            Configuration.from_file(path)

    def test_invalid_value_in_file(self, tmp_path):
        """Test file values are validated"""
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"d_thd": -1.0}), encoding="utf-8")
        with pytest.raises(ConfigurationError, match="d_thd"):
            Configuration.from_file(path)
