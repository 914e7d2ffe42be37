import json

import numpy as np
import pytest

from ucmimo import simulate
from ucmimo.simulate import (
    CSV_HEADER,
    ConfigError,
    DropResult,
    RateReport,
    SimulationConfig,
    build_drop,
    build_links,
    emit_results,
    read_rates_csv,
    run_campaign,
    run_drop,
)

TINY = {
    "geometry.n_aps": 6,
    "geometry.n_users": 3,
    "training.tau_p": 4,
    "run.n_drops": 2,
    "solver.max_outer": 10,
}


def tiny(**extra):
    return SimulationConfig({**TINY, **extra})


def test_defaults_and_unknown_keys():
    cfg = SimulationConfig({})
    assert cfg["geometry.n_aps"] == 20 and cfg.n_drops == 20
    with pytest.raises(ConfigError, match="geometry.n_apps"):
        SimulationConfig({"geometry.n_apps": 3})
    with pytest.raises(ConfigError):
        SimulationConfig.from_mapping({"geometry": {"n_aps": 3, "colour": "red"}})


@pytest.mark.parametrize("key,value", [
    ("geometry.n_aps", 2.5), ("geometry.n_aps", "3"), ("run.trace", 1), ("run.n_drops", 0),
    ("run.strategies", ["uniform", "greedy"]), ("run.csi", []), ("association.mode", "topn:0"),
    ("geometry.multiplexing_order", 3), ("training.tau_p", 1), ("channel.delta", 1.5),
    ("solver.block_mode", "rows"), ("power.dl_budget", "peak"), ("noise.sigma2_w", -1.0),
])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        SimulationConfig({key: value})


def test_presets():
    high = SimulationConfig.preset("high_density")
    assert (high["geometry.n_aps"], high["geometry.n_users"], high["training.tau_p"]) == (80, 15, 16)
    assert high["association.mode"] == "topn:6"
    low = SimulationConfig.preset("low_density")
    assert (low["geometry.n_aps"], low["geometry.n_users"], low["training.tau_p"]) == (50, 5, 8)
    assert low["association.mode"] == "topn:2"
    with pytest.raises(ConfigError):
        SimulationConfig.preset("medium")


def test_config_files(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('preset = "low_density"\n"run.seed" = 4\n[geometry]\nn_users = 3\n')
    cfg = SimulationConfig.from_file(toml)
    assert (cfg["geometry.n_aps"], cfg["geometry.n_users"], cfg.seed) == (50, 3, 4)
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"geometry.n_aps": 7}))
    assert SimulationConfig.from_file(js)["geometry.n_aps"] == 7
    bad = tmp_path / "bad.toml"
    bad.write_text("geometry = [")
    with pytest.raises(ConfigError):
        SimulationConfig.from_file(bad)


def test_thermal_noise_default_and_override():
    noise = SimulationConfig({}).noise_model()
    assert noise.sigma2_w == noise.sigma2_z == pytest.approx(6.33e-13, rel=2e-3)
    assert SimulationConfig({"noise.sigma2_z": 1e-12}).noise_model().sigma2_z == 1e-12


def test_drop_is_reproducible():
    cfg = tiny(**{"run.strategies": ["uniform", "srmax"]})
    assert run_drop(cfg, 1).rows == run_drop(cfg, 1).rows
    assert run_drop(cfg, 1).rows != run_drop(cfg, 0).rows


def test_perfect_csi_copies_true_channels():
    drop = build_drop(tiny(), 0)
    links = build_links(drop, "perfect", "cf", 20e6)
    G = drop.channels.true_channels
    Q = links.beamformers.precoders
    L = links.beamformers.spreading
    gq = np.einsum("kmab,kmaq->kmbq", G.conj(), Q)
    np.testing.assert_allclose(gq, np.broadcast_to(L[:, None], gq.shape), atol=1e-10)
    with pytest.raises(simulate.ParameterError):
        build_links(drop, "partial", "cf", 20e6)


def test_cell_free_equals_topn_all_users():
    base = {"run.strategies": ["uniform"], "run.n_drops": 1}
    cf = run_drop(tiny(**base, **{"association.mode": "cf"}), 0).rows
    top = run_drop(tiny(**base, **{"association.mode": "topn:3"}), 0).rows
    assert cf == top


def test_campaign_aggregation():
    cfg = tiny(**{"run.n_drops": 1, "run.strategies": ["uniform"]})
    report = run_campaign(cfg)
    single = run_drop(cfg, 0)
    assert report.rows == single.rows
    group = report.summary()["groups"]["uniform/estimated/ul"]
    rates = [r[5] for r in single.rows if r[1:4] == ("uniform", "estimated", "ul")]
    assert group["mean_sum_rate_bps"] == pytest.approx(sum(rates))
    report = run_campaign(tiny(**{"run.strategies": ["uniform"]}))
    assert len(report.cdf_samples("uniform", "perfect", "dl")) == 2 * 3
    assert np.all(np.diff(report.cdf_samples("uniform", "perfect", "dl")) >= 0)


def test_failed_drop_is_excluded(monkeypatch):
    real = simulate.run_drop

    def flaky(config, drop_index):
        if drop_index == 1:
            raise simulate.DropError(1, np.linalg.LinAlgError("singular"))
        return real(config, drop_index)

    monkeypatch.setattr(simulate, "run_drop", flaky)
    report = run_campaign(tiny(**{"run.n_drops": 3, "run.strategies": ["uniform"]}))
    summary = report.summary()
    assert summary["n_drops_failed"] == 1 and summary["n_drops_successful"] == 2
    assert summary["failed_drops"][0]["drop"] == 1
    assert {r[0] for r in report.rows} == {0, 2}


def test_drop_errors_carry_drop_index(monkeypatch):
    def boom(*args, **kwargs):
        raise ValueError("bad")

    monkeypatch.setattr(simulate, "build_links", boom)
    with pytest.raises(simulate.DropError, match="drop 5"):
        run_drop(tiny(), 5)


def _synthetic_report(rates):
    cfg = tiny(**{"run.strategies": ["uniform"], "run.csi": ["perfect"], "run.directions": ["dl"]})
    drops = [DropResult(i, rows=[(i, "uniform", "perfect", "dl", 0, r)]) for i, r in enumerate(rates)]
    return RateReport(cfg, drops)


def test_summary_median_and_header_only_csv(tmp_path):
    summary = _synthetic_report([1.0, 2.0, 3.0]).summary()
    assert summary["groups"]["uniform/perfect/dl"]["median_sum_rate_bps"] == 2.0
    paths = emit_results(_synthetic_report([]), tmp_path)
    assert open(paths["rates"]).read() == ",".join(CSV_HEADER) + "\n"


def test_csv_round_trip(tmp_path):
    rates = [1 / 3, 123456789.123456789, 2.5e-7]
    report = _synthetic_report(rates)
    paths = emit_results(report, tmp_path, trace=True)
    assert read_rates_csv(paths["rates"]) == report.rows
    echo = json.load(open(paths["config"]))
    assert echo["geometry.n_aps"] == 6
    assert set(paths) == {"rates", "summary", "config", "traces"}


def test_unwritable_output_fails_before_writing(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_results(_synthetic_report([1.0]), blocker / "out")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["file"]
