import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpnet import experiments as ex
from qpnet.errors import ConfigurationError, TrainingDivergedError
from qpnet.signal import periodogram, synth_sinusoid
from qpnet.training import DatasetSpec, TrainingConfig

L, U = 80.0, 400.0


def tiny_spec(**kw):
    base = dict(
        models=("WNc", "pQPNet"),
        dense_factors=(1, 8),
        sweep_training={},
        epochs_override={},
        model_overrides=dict(residual_channels=4, gate_channels=4, skip_channels=4, output_mid_channels=4),
        dataset=DatasetSpec(f0_list=(100, 200, 400), utterances_per_f0=1, seconds_per_utterance=0.05, seed=1),
        training=TrainingConfig(learning_rate=3e-3, epochs=1, batch_length_samples=1000, log_every_steps=0),
        test_f0=(40, 200, 650),
        phases_per_f0=2,
        test_seconds=0.05,
        write_wavs=False,
    )
    base.update(kw)
    return ex.ExperimentSpec(**base)


def row(f0, snr=0.0, err=0.0, status="ok", model="m", a=8, k=0):
    return ex.UtteranceRow("desk", model, a, f0, k, ex.band_of(f0, L, U), status, snr, f0, True, err)


# bands


@pytest.mark.parametrize(
    "f0,band",
    [(40, "under_half_L"), (50, "above_half_L"), (80, "above_half_L"), (400, "inside"),
     (81, "inside"), (600, "under_3half_U"), (650, "above_3half_U"), (10, "under_half_L")],
)
def test_band_of_examples(f0, band):
    assert ex.band_of(f0, L, U) == band


def test_band_of_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        ex.band_of(0, L, U)


@given(st.floats(1e-3, 5000), st.floats(1e-3, 5000))
def test_band_of_monotone(f, g):
    lo, hi = sorted((f, g))
    assert ex.BANDS.index(ex.band_of(lo, L, U)) <= ex.BANDS.index(ex.band_of(hi, L, U))


def test_default_grid_covers_every_band():
    bands = {ex.band_of(f, L, U) for f in ex.TEST_F0}
    assert bands == set(ex.BANDS)
    assert len(ex.TEST_F0) == 20


# aggregation


def test_band_metrics_recompute():
    rows = [row(40, 1, 0.5), row(30, 3, -1.0), row(200, 10, 0.1), row(300, 20, 0.0, k=1)]
    summary = {s.band: s for s in ex.band_group_metrics(rows, L, U)}
    assert summary["under_half_L"].mean_snr_db == pytest.approx(2.0)
    assert summary["under_half_L"].mean_logf0_rmse == pytest.approx(math.sqrt((0.25 + 1) / 2))
    assert summary["inside"].mean_snr_db == pytest.approx(15.0)
    avg = summary[ex.AVERAGE]
    assert avg.mean_snr_db == pytest.approx((2 + 15) / 2)
    assert avg.mean_logf0_rmse == pytest.approx((summary["under_half_L"].mean_logf0_rmse + summary["inside"].mean_logf0_rmse) / 2)
    assert avg.n == 4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(ex.TEST_F0), st.floats(-30, 40), st.floats(-3, 3)), min_size=1, max_size=30))
def test_average_is_mean_of_bands(data):
    rows = [row(f, s, e) for f, s, e in data]
    summary = ex.band_group_metrics(rows, L, U)
    bands = [s for s in summary if s.band != ex.AVERAGE]
    avg = summary[-1]
    assert avg.band == ex.AVERAGE
    assert avg.mean_snr_db == pytest.approx(np.mean([s.mean_snr_db for s in bands]))
    assert avg.n == len(rows) == sum(s.n for s in bands)


def test_failed_rows_excluded():
    rows = [row(200, 10, 0.0), row(200, math.nan, math.nan, status="failed", k=1)]
    (inside, avg) = ex.band_group_metrics(rows, L, U)
    assert inside.n == 1 and inside.mean_snr_db == 10
    all_failed = ex.band_group_metrics([row(200, status="failed")], L, U)
    assert all_failed[0].n == 0 and math.isnan(all_failed[0].mean_snr_db)


# output files


def _report():
    rows = [row(40, 1.5, 0.2), row(200, 12.25, 0.01), row(650, -3.0, 0.7)]
    rep = ex.EvalReport(rows=rows, summary=ex.band_group_metrics(rows, L, U), meta={"profile": "desk"})
    return rep


def test_summary_header_exact(tmp_path):
    ex.emit_report(_report(), tmp_path)
    first = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert first == "model,dense_factor,band,mean_snr_db,mean_logf0_rmse,n"
    rows_head = (tmp_path / "per_utterance.csv").read_text().splitlines()[0]
    assert rows_head.split(",") == ex.ROW_HEADER


def test_summary_round_trip(tmp_path):
    rep = _report()
    ex.emit_report(rep, tmp_path)
    back = ex.read_summary(tmp_path / "summary.csv")
    assert [(r["band"], r["n"]) for r in back] == [(s.band, s.n) for s in rep.summary]
    for r, s in zip(back, rep.summary):
        assert r["mean_snr_db"] == pytest.approx(s.mean_snr_db, abs=5e-5)
        assert r["mean_logf0_rmse"] == pytest.approx(s.mean_logf0_rmse, abs=5e-5)


def test_averages_recompute_from_file(tmp_path):
    ex.emit_report(_report(), tmp_path)
    back = ex.read_summary(tmp_path / "summary.csv")
    bands = [r for r in back if r["band"] != ex.AVERAGE]
    avg = [r for r in back if r["band"] == ex.AVERAGE][0]
    assert avg["mean_snr_db"] == pytest.approx(np.mean([r["mean_snr_db"] for r in bands]), abs=1e-4)


def test_psd_dump_peak(tmp_path):
    clip = synth_sinusoid(500, 1.0, 22050, 0.3, 0.5)
    rep = _report()
    rep.psds[("m", 8, 500.0, 0)] = periodogram(clip)
    ex.emit_report(rep, tmp_path)
    with (tmp_path / "psd" / "m_8_500_0.csv").open() as fh:
        recs = list(csv.DictReader(fh))
    freqs = np.array([float(r["freq_hz"]) for r in recs])
    power = np.array([float(r["power"]) for r in recs])
    assert abs(freqs[power.argmax()] - 500) <= 22050 / len(clip)


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        ex.emit_report(ex.EvalReport(), tmp_path)


# spec


def test_spec_json_round_trip(tmp_path):
    spec = tiny_spec()
    ex.save_spec(tmp_path / "s.json", spec)
    assert ex.load_spec(tmp_path / "s.json").to_dict() == spec.to_dict()


def test_spec_rejects_unknown_keys_and_models(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"modles": ["WNc"]}))
    with pytest.raises(ConfigurationError, match="modles"):
        ex.load_spec(tmp_path / "bad.json")
    with pytest.raises(ConfigurationError):
        ex.ExperimentSpec(models=("WaveRNN",))
    with pytest.raises(ConfigurationError, match="not found"):
        ex.load_spec(tmp_path / "missing.json")


def test_with_seed_reaches_every_seed():
    spec = ex.ExperimentSpec().with_seed(9)
    assert spec.seed == spec.dataset.seed == spec.training.seed == 9


# test grid


def test_grid_covers_each_f0_phase_once():
    spec = ex.ExperimentSpec()
    config = spec.model_config("pQPNet", 8)
    items = ex.grid_requests(spec, config)
    keys = [(f0, k) for f0, k, _ in items]
    assert len(keys) == len(set(keys)) == 20 * 10
    assert {f for f, _ in keys} == set(map(float, ex.TEST_F0))


def test_grid_seeds_differ_by_phase():
    spec = tiny_spec()
    items = ex.grid_requests(spec, spec.model_config("pQPNet", 8))
    a, b = items[0][2], items[1][2]
    assert not np.array_equal(a.seed_clip.samples, b.seed_clip.samples)
    assert a.rng_seed != b.rng_seed


def test_batches_group_all_items():
    spec = ex.ExperimentSpec()
    config = spec.model_config("WNc", 8)
    items = ex.grid_requests(spec, config)
    batches = ex._batches(items, config, 20)
    assert sum(len(b) for b in batches) == len(items)
    assert all(len(b) <= 20 for b in batches)


# end to end


def test_single_factor_sweep_report(tmp_path):
    spec = tiny_spec(dense_factors=(8,))
    rep = ex.run_dense_sweep(spec, tmp_path)
    assert rep.groups() == [("pQPNet", 8)]
    assert len(rep.rows) == 3 * 2
    meta = json.loads((tmp_path / "report.json").read_text())
    assert meta["profile"] == "desk" and meta["kind"] == "dense_sweep"
    assert (tmp_path / "models" / "pQPNet_a8.npz").exists()


def test_single_model_comparison_report(tmp_path):
    rep = ex.run_model_comparison(tiny_spec(models=("WNc",)), tmp_path)
    assert rep.groups() == [("WNc", 8)]
    assert {r.band for r in rep.rows} == {"under_half_L", "inside", "above_3half_U"}


def test_sweep_training_layers():
    spec = tiny_spec(sweep_training={"epochs": 3, "final_lr_fraction": 0.1}, epochs_override={"1": 5})
    assert spec.sweep_training_for(1).epochs == 5
    assert spec.sweep_training_for(8).epochs == 3
    assert spec.sweep_training_for(8).final_lr_fraction == 0.1
    assert spec.sweep_training_for(8).learning_rate == spec.training.learning_rate
    with pytest.raises(ConfigurationError, match="sweep_training"):
        tiny_spec(sweep_training={"lr": 1})


def test_epoch_overrides_apply_to_sweep_only(tmp_path):
    spec = tiny_spec(models=("pQPNet",), dense_factors=(1, 8), epochs_override={"1": 2})
    sweep = ex.run_dense_sweep(spec, tmp_path / "s").meta["models"]
    assert (sweep["pQPNet_a1"]["epochs"], sweep["pQPNet_a8"]["epochs"]) == (2, 1)
    assert (sweep["pQPNet_a1"]["steps"], sweep["pQPNet_a8"]["steps"]) == (6, 3)
    spec = spec.with_changes(epochs_override={"8": 3})
    comparison = ex.run_model_comparison(spec, tmp_path / "c").meta["models"]
    assert comparison["pQPNet_a8"]["epochs"] == 1


def test_tiny_study_deterministic(tmp_path):
    spec = tiny_spec()
    ex.run_model_comparison(spec, tmp_path / "a")
    ex.run_model_comparison(spec, tmp_path / "b")
    for name in ("summary.csv", "per_utterance.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cached_checkpoint_reused(tmp_path, monkeypatch):
    spec = tiny_spec(dense_factors=(8,))
    first = ex.run_dense_sweep(spec, tmp_path)

    def boom(*a, **k):
        raise AssertionError("should not retrain")

    monkeypatch.setattr(ex, "train", boom)
    again = ex.run_dense_sweep(spec, tmp_path)
    assert [r.snr_db for r in again.rows] == [r.snr_db for r in first.rows]


def test_diverged_model_recorded_as_failed(tmp_path, monkeypatch):
    real = ex.train_model

    def flaky(spec, name, a, model_dir=None, training=None):
        if name == "WNc":
            raise TrainingDivergedError("loss became nan at step 3 (learning rate 0.003)")
        return real(spec, name, a, model_dir, training)

    monkeypatch.setattr(ex, "train_model", flaky)
    rep = ex.run_model_comparison(tiny_spec(), tmp_path)
    failed = [r for r in rep.rows if r.model == "WNc"]
    assert failed and all(r.status == "failed" for r in failed)
    assert all(r.status == "ok" for r in rep.rows if r.model == "pQPNet")
    text = (tmp_path / "per_utterance.csv").read_text()
    assert "failed" in text
    assert json.loads((tmp_path / "report.json").read_text())["models"]["WNc_a8"]["status"] == "failed"


def test_wavs_written_when_enabled(tmp_path):
    spec = tiny_spec(models=("pQPNet",), write_wavs=True, test_f0=(200,), phases_per_f0=1)
    ex.run_model_comparison(spec, tmp_path)
    assert (tmp_path / "wav" / "pQPNet_8_200_0.wav").exists()
