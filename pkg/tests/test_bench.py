import math

import numpy as np
import pytest
import yaml

from splitflow import bench
from splitflow.config import config_from_dict, reference_config
from splitflow.fields import MlpField
from splitflow.metrics import NOT_APPLICABLE
from splitflow.training import train


def small_cfg(tmp_path, **bench_kw):
    raw = yaml.safe_load(reference_config())
    raw["model"]["hidden"] = [16]
    raw["train"]["steps"] = 150
    raw["seeds"] = 3
    raw["bench"].update(target_samples=40, **bench_kw)
    raw["output_dir"] = str(tmp_path / "out")
    return config_from_dict(raw, tmp_path)


@pytest.fixture(scope="module")
def field(tmp_path_factory):
    cfg = small_cfg(tmp_path_factory.mktemp("f"))
    fld = MlpField.create(cfg.scene.shape, cfg.scene.cond_dim, cfg.model.hidden, seed=0)
    return train(fld, cfg.scene, cfg.train)[0]


class SubConditionBlowsUp:
    """Wraps a field so that only sub-target conditions produce non-finite velocities."""

    def __init__(self, fld, allowed):
        self.fld, self.allowed = fld, [a.embedding for a in allowed]
        self.input_shape, self.cond_dim = fld.input_shape, fld.cond_dim

    def velocity(self, x, sigma, cond):
        v = self.fld.velocity(x, sigma, cond)
        if cond.is_null or any(np.array_equal(cond.embedding, a) for a in self.allowed):
            return v
        return v * np.nan


def test_table_layout(tmp_path, field):
    cfg = small_cfg(tmp_path)
    rep = bench.run_bench(field, cfg)
    assert [r["method"] for r in rep.rows] == ["baseline", "avg", "ltp", "ltp+vfa"]
    assert len(rep.per_seed) == 12
    for row in rep.rows:
        assert row["failures"] == 0 and row["n_seeds"] == 3 and row["ssim"] == NOT_APPLICABLE
        for c in bench.METRIC_COLUMNS:
            assert not (isinstance(row[c], float) and math.isnan(row[c]))
    assert rep.rows[0]["step_count"] == 33 and rep.rows[-1]["step_count"] == 48


def test_sweep_rows_and_files(tmp_path, field):
    cfg = small_cfg(tmp_path, eta_dec_sweep=[30, 29, 28, 27, 26], methods=["baseline", "ltp+vfa"])
    rep = bench.run_bench(field, cfg)
    assert len(rep.rows) == 10
    assert [r["eta_dec"] for r in rep.rows if r["method"] == "ltp+vfa"] == [30, 29, 28, 27, 26]
    assert [r["step_count"] for r in rep.rows if r["method"] == "ltp+vfa"] == [42, 45, 48, 51, 54]
    path = tmp_path / "m.csv"
    bench.write_metrics_csv(path, rep)
    first = path.read_text().splitlines()[0]
    assert first.startswith("# splitflow-metrics v1 fingerprint=")
    rows = bench.read_metrics_csv(path)
    assert len(rows) == 10 and list(rows[0]) == list(bench.METRIC_COLUMNS)
    assert all("nan" not in v.lower() for r in rows for v in r.values())
    plots = bench.plot_metrics(rep.rows, tmp_path / "plots", cfg.bench.methods)
    assert len(plots) == 3 and all(p.read_text().startswith("<?xml") for p in plots)


def test_single_seed_single_method(tmp_path, field):
    cfg = small_cfg(tmp_path, methods=["ltp"])
    cfg.seeds = (4,)
    rep = bench.run_bench(field, cfg)
    assert len(rep.rows) == 1
    assert len(bench.plot_metrics(rep.rows, tmp_path / "p", cfg.bench.methods)) == 3


def test_pool_matches_serial(tmp_path, field):
    cfg = small_cfg(tmp_path)
    a = bench.run_bench(field, cfg, workers=1)
    b = bench.run_bench(field, cfg, workers=2)
    assert a.rows == b.rows


def test_outputs_are_deterministic(tmp_path, field):
    cfg = small_cfg(tmp_path)
    outs = []
    for k in range(2):
        rep = bench.run_bench(field, cfg)
        d = tmp_path / f"run{k}"
        d.mkdir()
        bench.write_metrics_csv(d / "m.csv", rep)
        bench.write_metrics_json(d / "m.json", rep)
        bench.write_per_seed_csv(d / "s.csv", rep)
        plots = bench.plot_metrics(rep.rows, d, cfg.bench.methods)
        outs.append([p.read_bytes() for p in [d / "m.csv", d / "m.json", d / "s.csv", *plots]])
    assert outs[0] == outs[1]


def test_failures_are_recorded_per_row(tmp_path, field):
    cfg = small_cfg(tmp_path)
    task = bench.prepare_task(cfg)
    broken = SubConditionBlowsUp(field, [task.cond_src, task.cond_tgt])
    with np.errstate(invalid="ignore"):
        rep = bench.run_bench(broken, cfg)
    by = {r["method"]: r for r in rep.rows}
    assert by["baseline"]["failures"] == 0
    for m in ("avg", "ltp", "ltp+vfa"):
        assert by[m]["failures"] == 3 and by[m]["background_displacement"] == NOT_APPLICABLE
    bench.write_per_seed_csv(tmp_path / "s.csv", rep)
    assert "NumericError" in (tmp_path / "s.csv").read_text()


def test_fingerprint_tracks_config(tmp_path):
    a, b = small_cfg(tmp_path), small_cfg(tmp_path)
    assert bench.config_fingerprint(a) == bench.config_fingerprint(b)
    b.seeds = (0, 1)
    assert bench.config_fingerprint(a) != bench.config_fingerprint(b)


class TestVfaHarness:
    def test_single_vector_margin_is_zero(self):
        res = bench.vfa_trials(1, dims=[5], ks=[1], seed=0)
        assert res.margins.tolist() == [0.0] and res.passed()

    def test_deterministic_histogram(self, tmp_path):
        for name in ("a", "b"):
            bench.write_margin_histogram(tmp_path / name, bench.vfa_trials(300, seed=3))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        text = (tmp_path / "a").read_text().splitlines()
        assert text[0].startswith("# splitflow-vfa-margins v1 trials=300")
        assert sum(int(line.split(",")[2]) for line in text[2:]) == 300

    def test_covers_requested_sizes(self):
        res = bench.vfa_trials(500, dims=[2, 16], ks=[1, 8], seed=1)
        assert set(res.ks) == {1, 8} and set(res.dims) == {2, 16} and res.passed()

    @pytest.mark.parametrize("kw", [{"trials": 0}, {"trials": 3, "dims": []}, {"trials": 3, "ks": [0]}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            bench.vfa_trials(**kw)
