import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.stats import norm

from oracles import expected_window_coincidences, idler_mean, step_signal_mean
from tgi.calibration import EtaEstimate, MeanImage, PeakWindow
from tgi.reconstruction import (CalibrationProfile, CoincidenceSeries, DecodedSignal,
                                blind_decode, calibrate, evaluate_ensemble,
                                gaussian_error_rate, reconstruct_series, threshold_decode)
from tgi.source import (DetectorGeometry, GeometryMismatch, PhotonFrame, SourceParams,
                        TimeSignal, derive_seed, generate_step, integrate_signal)


def exact_profile(shape, src, extent):
    """Calibration profile built from the model means instead of measured ones."""
    ms = MeanImage(step_signal_mean(shape, src), 10**9)
    mi = MeanImage(np.full(shape, idler_mean(src)), 10**9)
    dummy = EtaEstimate(src.eta_model, src.eta_model, 0)
    return CalibrationProfile(ms, mi, PeakWindow(0, 0, *extent), dummy, dummy)


def run_trial(geom, src, levels, seed, trial):
    steps = [generate_step(geom, src, lv, derive_seed(seed, trial, n))
             for n, lv in enumerate(levels)]
    return (integrate_signal([s.signal_frame for s in steps]),
            [s.idler_frame for s in steps])


def series(values, trial=0):
    return CoincidenceSeries(tuple(values), PeakWindow(0, 0), trial)


def test_threshold_decode_boundary():
    d = threshold_decode(series([10.0, 5.0, 4.999, -3.0]), 10.0)
    assert d.threshold == 5.0
    assert d.bits == (1, 1, 0, 0)  # exactly at the threshold decodes to 1
    assert_allclose(d.margins, [5, 0, 0.001, 8], atol=1e-12)
    with pytest.raises(ValueError):
        threshold_decode(series([1.0]), 0.0)


def test_blind_decode():
    assert blind_decode(series([8.0, 1.0, 4.0, 3.9])).bits == (1, 0, 1, 0)
    assert blind_decode(series([-1.0, -2.0])).bits == (0, 0)


def test_gaussian_error_rate_oracle():
    mu, s1, s0 = 10.0, 2.0, 1.5
    p1 = norm.cdf(-5 / s1)
    p0 = norm.sf(5 / s0)
    assert gaussian_error_rate(mu, s1, s0, 4, 8) == pytest.approx((4 * p1 + 4 * p0) / 8)
    # an SNR of 4.9 on both levels gives 0.7% per bit
    assert gaussian_error_rate(4.9, 1, 1, 4, 8) == pytest.approx(2 * norm.sf(2.45) / 2)
    assert gaussian_error_rate(4.9, 1, 1, 4, 8) == pytest.approx(0.00714, abs=1e-4)


def test_evaluate_ensemble_statistics():
    truth = TimeSignal.parse("1100")
    rows = [[10, 12, 1, -1], [14, 8, -2, 0], [12, 10, 1, 1]]
    trials = [(series(r, t), threshold_decode(series(r, t), 11.0)) for t, r in enumerate(rows)]
    m = evaluate_ensemble(trials, truth)
    c = np.array(rows, dtype=float)
    assert_allclose(m.step_mean, c.mean(0))
    assert_allclose(m.step_std, c.std(0, ddof=1))
    assert m.mean_one == pytest.approx(11.0)
    assert m.snr == pytest.approx(11.0 / c[:, :2].std(0, ddof=1).mean())
    assert m.error_rate == 0.0 and not m.degenerate


def test_evaluate_ensemble_degenerate_and_errors():
    truth = TimeSignal.parse("10")
    same = [(series([5.0, 0.0]), DecodedSignal((1, 0), 2.5, (2.5, 2.5)))] * 3
    m = evaluate_ensemble(same, truth)
    assert m.degenerate and math.isinf(m.snr)
    with pytest.raises(ValueError):
        evaluate_ensemble(same[:1], truth)
    with pytest.raises(ValueError):
        evaluate_ensemble(same, TimeSignal.parse("101"))
    wrong = [(series([5.0, 0.0]), DecodedSignal((0, 1), 2.5, (0, 0)))] * 2
    assert evaluate_ensemble(wrong, truth).error_rate == 1.0


def test_reconstruct_checks_geometry():
    geom = DetectorGeometry(32, 32)
    src = SourceParams(0.05, jitter_sigma_x=1.0, jitter_sigma_y=1.0)
    prof = exact_profile(geom.shape, src, (4, 3))
    sig = PhotonFrame.zeros(geom)
    with pytest.raises(GeometryMismatch):
        reconstruct_series(PhotonFrame.zeros(DetectorGeometry(16, 16)), [], prof)
    with pytest.raises(GeometryMismatch):
        reconstruct_series(sig, [PhotonFrame.zeros(DetectorGeometry(16, 16))], prof)
    with pytest.raises(ValueError):
        reconstruct_series(sig, [sig], prof, method="median")
    with pytest.raises(ValueError):
        reconstruct_series(sig, [sig], None)


def test_gaussian_method_runs_on_empty_frames():
    geom = DetectorGeometry(24, 24)
    src = SourceParams(0.05, jitter_sigma_x=1.0, jitter_sigma_y=1.0)
    prof = exact_profile(geom.shape, src, (4, 3))
    s = reconstruct_series(PhotonFrame.zeros(geom), [PhotonFrame.zeros(geom)] * 2, prof,
                           method="gaussian")
    assert s.values == (0.0, 0.0)


def test_calibrate_end_to_end():
    geom = DetectorGeometry(80, 80)
    src = SourceParams(0.1, 0.5, 0.5, jitter_sigma_x=2.0, jitter_sigma_y=1.0)
    pairs = []
    for k in range(200):
        st = generate_step(geom, src, 1, derive_seed(1, 7, k))
        pairs.append((st.signal_frame, st.idler_frame))
    prof = calibrate(pairs, (8, 3))
    assert (prof.window.center_dx, prof.window.center_dy) == (0, 0)
    assert prof.eta.eta == pytest.approx(0.5, abs=0.05)
    assert 0.6 < prof.capture_fraction < 1.0
    assert prof.geometry == geom


@pytest.mark.slow
def test_monte_carlo_mean_matches_exact_model():
    # strong-peak configuration so 600 trials pin the mean to ~0.4%
    geom = DetectorGeometry(128, 128)
    src = SourceParams(0.05, 0.6, 0.7, jitter_sigma_x=2.0, jitter_sigma_y=1.0,
                       background_signal=0.002, background_idler=0.005)
    levels = (1, 1, 0, 0)
    extent = (8, 3)
    prof = exact_profile(geom.shape, src, extent)
    vals = []
    for t in range(600):
        sig, idl = run_trial(geom, src, levels, 42, t)
        vals.append(reconstruct_series(sig, idl, prof).values)
    c = np.array(vals)
    for step in range(len(levels)):
        expect = expected_window_coincidences(geom.shape, src, levels, step, extent)
        se = c[:, step].std(ddof=1) / math.sqrt(len(c))
        assert abs(c[:, step].mean() - expect) < 3.5 * se, (step, c[:, step].mean(), expect, se)


def test_empty_idler_frames_give_equal_counts():
    geom = DetectorGeometry(40, 40)
    src = SourceParams(0.05, 0.5, 0.5, jitter_sigma_x=1.0, jitter_sigma_y=1.0)
    prof = exact_profile(geom.shape, src, (4, 3))
    sig, _ = run_trial(geom, src, (1, 0, 1, 0), 3, 0)
    s = reconstruct_series(sig, [PhotonFrame.zeros(geom)] * 4, prof)
    assert len(set(s.values)) == 1


def test_permuting_idler_frames_permutes_counts():
    geom = DetectorGeometry(40, 40)
    src = SourceParams(0.05, 0.5, 0.5, jitter_sigma_x=1.0, jitter_sigma_y=1.0)
    prof = exact_profile(geom.shape, src, (4, 3))
    sig, idl = run_trial(geom, src, (1, 1, 0, 0, 1), 4, 0)
    order = [3, 0, 4, 2, 1]
    base = reconstruct_series(sig, idl, prof).values
    perm = reconstruct_series(sig, [idl[k] for k in order], prof).values
    assert_allclose(perm, [base[k] for k in order], rtol=0, atol=1e-12)


values = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(values, st.floats(1e-3, 1e3), st.floats(0, 50))
def test_raising_a_count_never_clears_its_bit(vals, one, bump):
    before = threshold_decode(series(vals), one).bits
    raised = [v + bump if k == 0 else v for k, v in enumerate(vals)]
    after = threshold_decode(series(raised), one).bits
    assert after[0] >= before[0] and after[1:] == before[1:]


@settings(max_examples=60, deadline=None)
@given(values, st.floats(1e-3, 1e3), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_decoding_is_scale_free(vals, one, k):
    # powers of two keep the comparison exact in floating point
    a = threshold_decode(series(vals), one).bits
    b = threshold_decode(series([v * k for v in vals]), one * k).bits
    assert a == b
