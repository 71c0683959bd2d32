import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from _synth import ASIC, calibrated, probe_with_weakest
from outan.asic import AsicState, saturation_onset_code
from outan.calibration import (PowerCalibrator, build_table, calibrated_response, linearity, linearity_reports,
                               lookup, measure_ip_curves, nearest_codes, read_table, write_linearity, write_table)
from outan.exceptions import CalibrationError, OutOfRangeError, PowerStateError
from outan.probe import OPEN, IPCurve, make_failed


@pytest.fixture(scope="module")
def default_cal():
    return calibrated()


@pytest.mark.parametrize("weakest, lsb_nw", [(12, 11.72), (13, 12.70), (16, 15.63)])
def test_lsb_for_weakest_maxima(weakest, lsb_nw):
    _, _, table = calibrated(probe_with_weakest(weakest))
    assert table.target_max_power == weakest
    assert table.lsb * 1e3 == pytest.approx(lsb_nw, abs=0.05)


def test_default_probe_table(default_cal):
    _, _, t = default_cal
    assert t.target_max_power == 12.0
    assert t.lsb == pytest.approx(0.01171875)
    assert t.entries.shape == (1024, 32)


def test_lookup_rows(default_cal):
    _, _, t = default_cal
    assert t.row_for(0.0) == 0
    assert t.row_for(t.lsb) == 1
    assert t.row_for(12.0) == 1023
    assert t.row_for(1.5 * t.lsb) == 1  # halves go down
    assert t.row_for(1.51 * t.lsb) == 2
    assert lookup(t, 0, 0.0) == 0
    with pytest.raises(OutOfRangeError):
        t.row_for(12.01)
    with pytest.raises(OutOfRangeError):
        t.row_for(-0.1)


def test_columns_monotone_for_live_channels(default_cal):
    probe, _, t = default_cal
    for ch in probe.connected_channels:
        col = t.entries[:, ch]
        # Noise can swap neighbouring codes on the flat dead-zone floor only.
        assert np.all(np.diff(col[5:]) >= -2)
        assert col[-1] > col[1]
    assert not t.entries[:, 12:].any()


def test_entries_match_nearest_neighbour_oracle(default_cal):
    _, curves, t = default_cal
    for c in curves[:3]:
        for r in range(0, 1024, 7):
            desired = r * t.lsb
            dist = np.abs(c.power - desired)
            best = np.flatnonzero(dist == dist.min())[0]
            assert t.entries[r, c.channel] == best


@given(st.lists(st.floats(0, 20), min_size=1, max_size=50), st.lists(st.floats(0, 20), min_size=1, max_size=20))
def test_nearest_codes_property(power, targets):
    got = nearest_codes(power, targets)
    p = np.asarray(power)
    for t, k in zip(targets, got):
        d = np.abs(p - t)
        assert k == np.flatnonzero(d == d.min())[0]


def test_post_calibration_inl_within_one_lsb_where_reachable(default_cal):
    _, curves, t = default_cal
    for c in curves:
        rep = linearity(calibrated_response(t, c), t.lsb)
        reachable = np.array([np.abs(c.power - r * t.lsb).min() <= t.lsb for r in range(1024)])
        assert reachable.mean() > 0.99
        assert np.all(np.abs(rep.inl[reachable]) <= 1.0)


def test_pre_calibration_dnl_at_knee(default_cal):
    probe, curves, t = default_cal
    for c in curves:
        onset = saturation_onset_code(ASIC, c.channel, probe.load(c.channel))
        rep = linearity(c.power, t.lsb)
        window = rep.dnl[onset - 8: onset + 8]
        assert np.abs(window).max() > 1.0


def test_calibration_cancels_gain_mismatch():
    probe = probe_with_weakest(12)
    gains = tuple(1.0 + 0.03 * ((k % 5) - 2) for k in range(32))
    asic = replace(ASIC, gains=gains)
    curves = measure_ip_curves(asic, probe)
    t = build_table(curves)
    for desired in (0.5, 2.0, 6.0, 11.0):
        row = t.row_for(desired)
        calibrated_out = np.array([calibrated_response(t, c)[row] for c in curves])
        shared_code = int(np.median(t.entries[row, :12]))
        raw_out = np.array([c.power[shared_code] for c in curves])
        # One code step is up to ~1.7 LSB here, so 2 LSB is the resolution floor.
        assert np.ptp(calibrated_out) <= 2 * t.lsb
        assert np.ptp(raw_out) > 10 * np.ptp(calibrated_out)


def test_dead_channel_excluded_and_flagged():
    probe = probe_with_weakest(13)
    weak = probe.channel_map[2]
    probe = probe.with_led(weak, make_failed(probe.leds[weak], OPEN))
    curves = measure_ip_curves(ASIC, probe)
    t = build_table(curves)
    assert t.dead == (2,)
    assert not t.entries[:, 2].any()
    live = [c.max_power for c in curves if c.channel != 2]
    assert t.target_max_power == np.floor(min(live))


def test_all_dead_is_error():
    zero = IPCurve(0, np.arange(4), np.zeros(4), np.zeros(4), np.zeros(4), np.zeros(4), 1)
    with pytest.raises(CalibrationError):
        build_table([zero])


def test_measurement_requires_power():
    with pytest.raises(PowerStateError):
        measure_ip_curves(AsicState(), probe_with_weakest(12))


def test_measurement_is_deterministic():
    p = probe_with_weakest(12)
    a = measure_ip_curves(ASIC, p, seed=3)
    b = measure_ip_curves(ASIC, p, seed=3)
    np.testing.assert_array_equal(a[4].power, b[4].power)


def test_calibrator_estimator_api(default_cal):
    _, curves, t = default_cal
    cal = PowerCalibrator(granularity=0.5)
    assert clone(cal).get_params() == {"granularity": 0.5, "n_channels": 32}
    cal.fit(curves)
    assert cal.target_max_power_ == pytest.approx(np.floor(cal.weakest_max_power_ * 2) / 2)
    X = np.full((2, 32), 3.0)
    codes = cal.transform(X)
    assert codes.shape == (2, 32)
    assert codes[0, 0] == cal.lookup(0, 3.0)


def test_table_csv_round_trip(default_cal):
    _, _, t = default_cal
    buf = io.StringIO()
    write_table(t, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("target_max_power_uw,12.0,lsb_uw,0.01171875,dead,")
    assert lines[1] == "row," + ",".join(f"ch{k}" for k in range(32))
    back = read_table(io.StringIO(buf.getvalue()))
    assert back.target_max_power == t.target_max_power
    np.testing.assert_array_equal(back.entries, t.entries)


def test_table_rejects_inconsistent_lsb(default_cal):
    _, _, t = default_cal
    buf = io.StringIO()
    write_table(t, buf)
    bad = buf.getvalue().replace("0.01171875", "0.02", 1)
    with pytest.raises(ValueError):
        read_table(io.StringIO(bad))


def test_linearity_oracle():
    rep = linearity([0.0, 1.0, 2.5, 3.0], lsb=1.0)
    np.testing.assert_allclose(rep.dnl, [0.0, 0.5, -0.5])
    np.testing.assert_allclose(rep.inl, [0.0, 0.0, 0.5, 0.0])


def test_linearity_reports_csv(default_cal):
    _, curves, t = default_cal
    reps = linearity_reports(t, curves[:2])
    assert [r.phase for r in reps] == ["pre", "post", "pre", "post"]
    buf = io.StringIO()
    write_linearity(reps, buf)
    assert buf.getvalue().splitlines()[0] == "phase,channel,index,dnl_lsb,inl_lsb"
    assert len(buf.getvalue().splitlines()) == 1 + 4 * 1024
