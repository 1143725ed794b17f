import os

import numpy as np
import pytest
import yaml

from canalmpc.io import (
    ConfigError,
    builtin_config,
    emit_plot_data,
    load_config,
    parse_config,
    read_trace,
    scenario_by_name,
    trace_columns,
    write_trace,
)
from canalmpc.simulate import Scenario, run_centralized
from canalmpc.supervisor import SynthesisCache

CACHE = SynthesisCache()


def small_scenario(horizon=30):
    return Scenario("flat", horizon, {i: ((0, 2.0),) for i in range(1, 14)})


@pytest.fixture(scope="module")
def short_trace():
    tr = run_centralized(small_scenario(), seed=1, cache=CACHE)
    tr.config_hash = "abc123def456"
    return tr


class TestLoadConfig:
    def test_bundled_scenario1(self):
        cfg = builtin_config("scenario1")
        assert len(cfg.reaches) == 13
        assert cfg.reaches[0].backwater_area == pytest.approx(0.9318e5)
        assert cfg.reaches[3].backwater_area == pytest.approx(3.7060e5)
        assert [r.delay_steps for r in cfg.reaches] == [3, 1, 2, 2, 2, 3, 2, 1, 2, 2, 2, 2, 2]
        assert cfg.controller.prediction_horizon == 10
        assert cfg.controller.control_horizon == 3
        assert cfg.controller.level_weight == 250.0
        assert cfg.controller.input_weight == 2800.0
        assert cfg.controller.slack_weight == 1.0e4
        assert cfg.controller.link_cost == 0.6
        assert cfg.controller.sample_time == 300.0
        assert cfg.scenario.name == "scenario1"
        assert cfg.scenario.offtakes_at(72)[12] == 0.0

    def test_bundled_scenario2(self):
        cfg = builtin_config("scenario2")
        assert np.array_equal(cfg.scenario.offtakes_at(150), cfg.scenario.offtakes_at(0))

    def test_defaults_applied_when_sections_missing(self, tmp_path):
        doc = {"scenario": {
            "name": "mini", "horizon": 10,
            "offtakes": {str(i): [[0, 1.0]] for i in range(1, 14)},
        }}
        path = tmp_path / "min.yaml"
        path.write_text(yaml.safe_dump(doc))
        cfg = load_config(path)
        assert cfg.controller.prediction_horizon == 10
        assert cfg.controller.input_weight == 2800.0
        assert cfg.t_lambda == 4
        assert len(cfg.reaches) == 13  # case-study table by default

    def test_zero_delay_rejected(self, tmp_path):
        doc = {"reaches": [
            {"index": 1, "backwater_area": 1e5, "delay_steps": 0},
        ]}
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(doc))
        with pytest.raises(ConfigError, match="delay"):
            load_config(path)

    def test_unknown_controller_field_named(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config({"controller": {"bogus": 1}})

    def test_parse_error_reported(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("controller: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_scenario_reach_must_exist(self):
        with pytest.raises(ConfigError, match="reach 99"):
            parse_config({"scenario": {
                "name": "x", "horizon": 5,
                "offtakes": {"99": [[0, 1.0]]},
            }})

    def test_config_hash_stable(self):
        a = builtin_config("scenario1").config_hash()
        b = builtin_config("scenario1").config_hash()
        assert a == b and len(a) == 12
        assert builtin_config("scenario2").config_hash() != a

    def test_unknown_scenario_name(self):
        with pytest.raises(ConfigError):
            scenario_by_name("scenario9")


class TestTraceRoundTrip:
    def test_lossless(self, short_trace, tmp_path):
        path = tmp_path / "trace.csv"
        write_trace(short_trace, path)
        back = read_trace(path)
        assert back.arrays_equal(short_trace)
        assert back.config_hash == short_trace.config_hash
        # byte-identical on rewrite
        path2 = tmp_path / "trace2.csv"
        write_trace(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_column_count(self, short_trace, tmp_path):
        path = tmp_path / "trace.csv"
        write_trace(short_trace, path)
        lines = path.read_text().splitlines()
        header = [ln for ln in lines if not ln.startswith("#")][0]
        assert len(header.split(",")) == 1 + 4 * 13 + 1 + 4
        assert header.split(",") == trace_columns(13)

    def test_centralized_topology_column(self, short_trace, tmp_path):
        path = tmp_path / "trace.csv"
        write_trace(short_trace, path)
        back = read_trace(path)
        assert all(bits == "1" * 12 for bits in back.topology_bits)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.csv"
        path.write_text("step,e_1\n0,1.0\n")
        with pytest.raises(ValueError, match="not a canalmpc trace"):
            read_trace(path)

    def test_full_precision(self, short_trace, tmp_path):
        short_trace.levels[0, 0] = 0.1 + 0.2  # not representable prettily
        path = tmp_path / "trace.csv"
        write_trace(short_trace, path)
        back = read_trace(path)
        assert back.levels[0, 0] == short_trace.levels[0, 0]


class TestEmitPlotData:
    def test_files_and_monotone_costs(self, short_trace, tmp_path):
        files = emit_plot_data(short_trace, tmp_path / "plots", c_link=0.6)
        names = {os.path.basename(f) for f in files}
        assert names == {"levels.csv", "inflows.csv", "links.csv", "costs_accumulated.csv"}
        costs = np.genfromtxt(tmp_path / "plots" / "costs_accumulated.csv",
                              delimiter=",", names=True)
        assert np.all(np.diff(costs["perf_cum"]) >= -1e-12)
        assert np.all(np.diff(costs["combined_cum"]) >= -1e-12)

    def test_centralized_raster_all_ones(self, short_trace, tmp_path):
        emit_plot_data(short_trace, tmp_path / "plots", c_link=0.6)
        raster = np.genfromtxt(tmp_path / "plots" / "links.csv", delimiter=",", skip_header=1)
        assert np.all(raster[:, 1:] == 1)
