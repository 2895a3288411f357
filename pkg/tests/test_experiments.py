import csv
import math
import os

import numpy as np
import pytest

from ofdm_loading.channel import ChannelParams
from ofdm_loading.experiments import (
    AGGREGATE_FIELDS,
    TRIAL_FIELDS,
    SweepConfig,
    SweepKind,
    SweepResult,
    TrialRecord,
    average_snr,
    emit,
    figure_config,
    noise_for_snr,
    run_sweep,
)

SMALL = ChannelParams(16, 5, 0.2, 1e-9, 5)


def rec(snr_post, converged=True, curve="uncapped", value=1.0, trial=0):
    return TrialRecord(curve, value, trial, converged, "PowerInactive", 5, "Converged",
                       10.0, 1e-5, 5e-5, snr_post, 1.0)


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_noise_for_snr():
    assert noise_for_snr(30.0) == pytest.approx(1e-9)
    assert noise_for_snr(0.0) == pytest.approx(1e-6)


def test_average_snr():
    assert average_snr([rec(100.0), rec(100.0)]) == pytest.approx(20.0)
    assert average_snr([rec(10.0), rec(1000.0, converged=False)]) == pytest.approx(10.0)
    assert math.isnan(average_snr([rec(0.0)]))
    assert math.isnan(average_snr([]))


def test_figure_presets():
    f1 = figure_config(1, 10)
    assert f1.kind is SweepKind.SNR and f1.grid[0] == 10.0 and f1.grid[-1] == 30.0 and len(f1.grid) == 9
    assert f1.curves() == ("uncapped", "cap=0.0001W")
    f2 = figure_config(2, 10, seed=7)
    assert f2.grid == tuple(round(0.1 * k, 10) for k in range(1, 10))
    assert f2.channel.noise_variance == 1e-9 and f2.channel.seed == 7
    f3 = figure_config(3)
    assert f3.kind is SweepKind.POWER_THRESHOLD and f3.curves() == ("capped",)
    assert figure_config(4).curves() == ("proposed", "baseline")
    assert figure_config(2, caps=(math.inf,)).curves() == ("uncapped",)
    with pytest.raises(ValueError):
        figure_config(5)


@pytest.mark.parametrize(
    "kw",
    [dict(grid=()), dict(grid=(2.0, 1.0)), dict(n_trials=0), dict(n_trials=1.5),
     dict(kind=SweepKind.ALPHA, grid=(0.5, 1.0)), dict(kind=SweepKind.POWER_THRESHOLD, grid=(0.0, 1.0)),
     dict(kind="Other")],
)
def test_sweep_config_validation(kw):
    args = dict(kind=SweepKind.SNR, grid=(10.0, 20.0))
    args.update(kw)
    with pytest.raises(ValueError):
        SweepConfig(**args)


def test_single_point_single_trial(tmp_path):
    cfg = SweepConfig(SweepKind.SNR, (20.0,), 1, channel=SMALL, caps=(math.inf,))
    res = run_sweep(cfg)
    assert len(res.records) == 1
    agg = res.aggregate()
    assert len(agg) == 1 and len(agg[0]) == len(AGGREGATE_FIELDS) == 7
    assert agg[0][5] == "1/1"
    emit(res, tmp_path)
    rows = read(tmp_path / "snr-aggregate.csv")
    assert rows[0] == list(AGGREGATE_FIELDS) and len(rows) == 2


def test_empty_result_writes_headers(tmp_path):
    cfg = SweepConfig(SweepKind.SNR, (20.0,), 1, channel=SMALL)
    written = emit(SweepResult(cfg), tmp_path, prefix="empty")
    assert read(tmp_path / "empty-aggregate.csv") == [list(AGGREGATE_FIELDS)]
    assert read(tmp_path / "empty-trials.csv") == [list(TRIAL_FIELDS)]
    assert all(os.path.exists(p) for p in written)


def test_common_random_numbers_across_snr():
    cfg = SweepConfig(SweepKind.SNR, (15.0, 20.0, 25.0), 2, channel=SMALL, caps=(math.inf,))
    res = run_sweep(cfg)
    for t in range(2):
        pre = [r.snr_pre for r in res.records if r.trial == t]
        # reference power fixed, so pre-SNR scales exactly with 1/noise
        ratios = np.array(pre[1:]) / np.array(pre[:-1])
        np.testing.assert_allclose(ratios, 10 ** 0.5, rtol=1e-12)


def test_trials_csv_reproduces_aggregate(tmp_path):
    cfg = SweepConfig(SweepKind.ALPHA, (0.3, 0.7), 3, channel=SMALL, caps=(math.inf, 2e-5))
    res = run_sweep(cfg)
    emit(res, tmp_path, both_snr=True)
    trials = read(tmp_path / "alpha-trials.csv")
    assert trials[0] == list(TRIAL_FIELDS)
    body = trials[1:]
    assert len(body) == 3 * 2 * 2
    agg = read(tmp_path / "alpha-aggregate.csv")[1:]
    for row in agg:
        mine = [r for r in body if r[0] == row[0] and r[1] == row[1] and r[3] == "1"]
        assert float(row[2]) == float(np.mean([float(r[7]) for r in mine]))
        assert float(row[3]) == float(np.mean([float(r[8]) for r in mine]))
        assert row[5] == f"{len(mine)}/3"
    # repr round trip: every float field reads back to the stored record exactly
    for r, line in zip(res.records, body):
        assert float(line[8]) == r.power_W and float(line[9]) == r.avg_ber
    assert (tmp_path / "alpha-cap_2e-05W-power.dat").exists()
    snr = read(tmp_path / "alpha-snr.csv")
    assert snr[0] == ["curve", "value", "snr_post_db", "snr_pre_db"] and len(snr) == 5


def test_capped_curve_never_exceeds_cap():
    cfg = SweepConfig(SweepKind.POWER_THRESHOLD, (5e-6, 2e-5, 1e-3), 3, channel=SMALL, caps=())
    res = run_sweep(cfg)
    for r in res.records:
        assert r.converged and r.power_W <= r.value * (1 + 1e-9)
    top = [r.power_W for r in res.records if r.value == 1e-3]
    assert all(r.case == "PowerInactive" for r in res.records if r.value == 1e-3)
    assert len(top) == 3


def test_baseline_compare_sweep(tmp_path):
    cfg = figure_config(4, 2, seed=1, grid=(20.0,), channel=SMALL)
    res = run_sweep(cfg)
    assert [r.curve for r in res.records] == ["proposed", "proposed", "baseline", "baseline"]
    for (snr, row), base in zip(res.comparisons, res.curve("baseline")):
        assert snr == 20.0 and row.thr_baseline == base.throughput
        assert abs(base.power_W - row.power_W) <= 1e-12 * row.power_W
    emit(res, tmp_path, prefix="f4")
    assert len(read(tmp_path / "f4-compare.csv")) == 3


def test_parallel_matches_serial(tmp_path):
    cfg = SweepConfig(SweepKind.SNR, (20.0, 25.0), 4, channel=SMALL)
    a, b = run_sweep(cfg, jobs=1), run_sweep(cfg, jobs=2)
    emit(a, tmp_path / "a")
    emit(b, tmp_path / "b")
    for name in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
