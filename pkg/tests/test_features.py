import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from behaveformer import features as F
from behaveformer.features import EventLog, ImuLog


def log_of(events, release=True):
    codes = [e[0] for e in events]
    press = [e[1] for e in events]
    rel = [e[2] for e in events] if release else None
    return EventLog("u", "s", codes, press, rel)


def brute_force_bins(t, v, t0, t1, bins):
    """Loop-based bin means; the reference for the vectorised resampler."""
    width = (t1 - t0) / bins
    means = [None] * bins
    for b in range(bins):
        lo, hi = t0 + b * width, t0 + (b + 1) * width
        sel = [x for ti, x in zip(t, v) if lo <= ti < hi or (b == bins - 1 and ti == t1)]
        if sel:
            means[b] = sum(sel) / len(sel)
    return means


class TestKeystroke:
    def test_single_event(self):
        out = F.extract_keystroke_features(log_of([(65, 0.0, 0.1)]), window=50)
        assert out.shape == (50, 10)
        np.testing.assert_allclose(out[0], [0.1, 0, 0, 0, 0, 0, 0, 0, 0, 65 / 255])
        assert not out[1:].any()

    def test_digram_timings(self):
        out = F.extract_keystroke_features(log_of([(65, 0.0, 0.1), (66, 0.15, 0.3)]), window=5)
        hl, du, ud, dd, uu = out[0, :5]
        assert hl == pytest.approx(0.1)
        assert du == pytest.approx(0.30)
        assert ud == pytest.approx(0.05)
        assert dd == pytest.approx(0.15)
        assert uu == pytest.approx(0.20)
        # the last key has no partner
        assert not out[1, 1:9].any()

    def test_trigram_timings(self):
        ev = [(65, 0.0, 0.1), (66, 0.15, 0.3), (67, 0.5, 0.55)]
        out = F.extract_keystroke_features(log_of(ev), window=5)
        # DU_tri, UD_tri, DD_tri, UU_tri from key 0 to key 2
        np.testing.assert_allclose(out[0, 5:9], [0.55, 0.4, 0.5, 0.45])
        assert not out[1, 5:9].any()

    def test_humidb_schema_three_channels(self):
        ev = [(65, 0.0), (66, 0.2), (67, 0.5)]
        out = F.extract_keystroke_features(
            EventLog("u", "s", [e[0] for e in ev], [e[1] for e in ev]), F.HUMIDB_KEYSTROKE, window=4)
        assert out.shape == (4, 3)
        np.testing.assert_allclose(out[0], [0.2, 0.5, 65 / 255])
        np.testing.assert_allclose(out[1], [0.3, 0.0, 66 / 255])

    def test_full_schema_needs_release(self):
        with pytest.raises(F.FeatureError, match="release"):
            F.extract_keystroke_features(log_of([(65, 0.0, 0.1)], release=False))

    def test_empty_log(self):
        with pytest.raises(F.FeatureError, match="empty"):
            F.extract_keystroke_features(EventLog("u", "s", [], [], []))

    def test_truncation_and_ascii_clamp(self):
        ev = [(300, float(i), i + 0.05) for i in range(60)]
        out = F.extract_keystroke_features(log_of(ev), window=50)
        assert out.shape == (50, 10)
        assert np.all(out[:, 9] == 1.0)
        # the last kept row has no partner inside the window
        assert out[49, 1] == 0.0 and out[48, 1] > 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.0, 0.5)), min_size=1, max_size=70))
    def test_nonnegative_for_sequential_typing(self, gaps):
        # each key is released before the next press: all timing channels >= 0
        t, ev = 0.0, []
        for gap, hold in gaps:
            ev.append((97, t, t + hold))
            t += hold + gap
        out = F.extract_keystroke_features(log_of(ev), window=50)
        assert out.shape == (50, 10)
        assert np.all(np.isfinite(out)) and np.all(out >= 0)

    def test_segment_log_keeps_half_window_remainder(self):
        ev = [(65, float(i), i + 0.1) for i in range(55)]
        assert [len(c) for c in F.segment_log(log_of(ev), 20)] == [20, 20, 15]
        ev = ev[:45]
        assert [len(c) for c in F.segment_log(log_of(ev), 20)] == [20, 20]


class TestResample:
    def test_bin_centres_identity(self):
        centres = (np.arange(100) + 0.5) / 100
        vals = np.random.default_rng(0).normal(size=(100, 3))
        out = F.synchronize_resample(ImuLog({"accelerometer": (centres, vals)}), 0.0, 1.0, ["accelerometer"])
        np.testing.assert_allclose(out["accelerometer"], vals)

    def test_two_per_bin_matches_brute_force(self):
        t = (np.arange(200) + 0.5) / 200 * 4.0
        vals = np.random.default_rng(1).normal(size=(200, 3))
        out = F.synchronize_resample(ImuLog({"gyroscope": (t, vals)}), 0.0, 4.0, ["gyroscope"])["gyroscope"]
        for c in range(3):
            ref = brute_force_bins(t, vals[:, c], 0.0, 4.0, 100)
            np.testing.assert_allclose(out[:, c], ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out[0], vals[:2].mean(axis=0))

    def test_irregular_sampling_matches_brute_force(self):
        rng = np.random.default_rng(2)
        t = np.sort(rng.uniform(0, 3, 700))
        vals = rng.normal(size=(700, 3))
        out = F.synchronize_resample(ImuLog({"magnetometer": (t, vals)}), 0.0, 3.0, ["magnetometer"])["magnetometer"]
        ref = brute_force_bins(t, vals[:, 1], 0.0, 3.0, 100)
        got = [out[b, 1] for b in range(100) if ref[b] is not None]
        np.testing.assert_allclose(got, [r for r in ref if r is not None], atol=1e-12)

    def test_interior_gap_is_midpoint(self):
        centres = (np.arange(100) + 0.5) / 100
        vals = np.ones((100, 3))
        vals[51:] = 3.0
        keep = np.arange(100) != 50
        out = F.synchronize_resample(ImuLog({"accelerometer": (centres[keep], vals[keep])}), 0.0, 1.0, ["accelerometer"])
        np.testing.assert_allclose(out["accelerometer"][50], [2.0, 2.0, 2.0])

    def test_edge_gaps_copy_neighbour(self):
        centres = (np.arange(100) + 0.5) / 100
        vals = np.arange(300, dtype=float).reshape(100, 3)
        out = F.synchronize_resample(ImuLog({"accelerometer": (centres[3:97], vals[3:97])}), 0.0, 1.0, ["accelerometer"])
        np.testing.assert_allclose(out["accelerometer"][:3], np.repeat(vals[3:4], 3, axis=0))
        np.testing.assert_allclose(out["accelerometer"][97:], np.repeat(vals[96:97], 3, axis=0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31))
    def test_mean_preserved_with_equal_counts(self, per_bin, seed):
        t = (np.arange(100 * per_bin) + 0.5) / (100 * per_bin)
        vals = np.random.default_rng(seed).normal(size=(len(t), 3))
        out = F.synchronize_resample(ImuLog({"accelerometer": (t, vals)}), 0.0, 1.0, ["accelerometer"])
        np.testing.assert_allclose(out["accelerometer"].mean(axis=0), vals.mean(axis=0), atol=1e-9)

    def test_no_samples_in_window(self):
        imu = ImuLog({"accelerometer": (np.array([5.0, 6.0]), np.zeros((2, 3)))})
        with pytest.raises(F.FeatureError, match="no accelerometer samples"):
            F.synchronize_resample(imu, 0.0, 1.0, ["accelerometer"])


class TestImuFeatures:
    def test_constant_channel(self):
        res = {s: np.full((100, 3), 2.5) for s in F.SENSORS}
        out = F.extract_imu_features(res)
        assert out.shape == (100, 36)
        assert not out[:, 3:9].any()
        np.testing.assert_allclose(out[0, 9:12], 250.0)
        assert np.abs(out[1:, 9:12]).max() < 1e-9

    def test_ramp_derivatives(self):
        ramp = np.repeat(np.arange(100, dtype=float)[:, None], 3, axis=1)
        out = F.extract_imu_features({"gyroscope": ramp}, ["gyroscope"])
        np.testing.assert_allclose(out[:, 3:6], 1.0)
        np.testing.assert_allclose(out[1:-2, 6:9], 0.0)

    def test_fft_matches_direct_dft(self):
        x = np.random.default_rng(0).normal(size=(100, 3))
        n = np.arange(100)
        dft = np.abs(np.exp(-2j * np.pi * np.outer(n, n) / 100) @ x)
        out = F.extract_imu_features({"accelerometer": x}, ["accelerometer"])
        np.testing.assert_allclose(out[:, 9:12], dft, atol=1e-9)

    def test_ablation_removes_contiguous_block(self):
        rng = np.random.default_rng(0)
        res = {s: rng.normal(size=(100, 3)) for s in F.SENSORS}
        full = F.extract_imu_features(res)
        ag = F.extract_imu_features(res, ["gyroscope", "accelerometer"])
        assert ag.shape == (100, 24)
        np.testing.assert_array_equal(ag, full[:, :24])
        am = F.extract_imu_features(res, ["accelerometer", "magnetometer"])
        np.testing.assert_array_equal(am, np.concatenate([full[:, :12], full[:, 24:]], axis=1))

    def test_wrong_shape(self):
        with pytest.raises(F.FeatureError, match="expected shape"):
            F.extract_imu_features({"accelerometer": np.zeros((50, 3))}, ["accelerometer"])


class TestNormalizer:
    def test_closed_form_map(self):
        schema = F.imu_schema(["accelerometer"])
        train = np.zeros((3, 12))
        train[:, 0] = [0.0, 5.0, 2.5]
        state = F.fit_normalizer([train], schema)
        out = F.apply_normalizer(state, train, schema)
        np.testing.assert_allclose(out[:, 0], [0.0, 10.0, 5.0])
        # constant channels go to the range minimum
        assert not out[:, 1:].any()

    def test_target_range(self):
        state = F.fit_normalizer([np.ones((2, 12))], F.imu_schema(["gyroscope"]))
        assert state.target == (0.0, 10.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_training_set_spans_target(self, seed):
        rng = np.random.default_rng(seed)
        schema = F.imu_schema()
        train = [rng.normal(size=(100, 36)) * rng.uniform(0.1, 50) for _ in range(4)]
        state = F.fit_normalizer(train, schema)
        out = np.concatenate([F.apply_normalizer(state, s, schema) for s in train])
        np.testing.assert_allclose(out.min(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.max(axis=0), 10.0, atol=1e-9)

    def test_keystroke_passthrough(self):
        x = np.random.default_rng(0).uniform(size=(5, 10))
        state = F.fit_normalizer([x], F.FULL_KEYSTROKE)
        np.testing.assert_array_equal(F.apply_normalizer(state, x, F.FULL_KEYSTROKE), x)

    def test_unfitted(self):
        with pytest.raises(F.FeatureError, match="not been fitted"):
            F.apply_normalizer(None, np.zeros((2, 12)), F.imu_schema(["gyroscope"]))

    def test_schema_mismatch(self):
        state = F.fit_normalizer([np.ones((2, 12))], F.imu_schema(["gyroscope"]))
        with pytest.raises(F.FeatureError, match="normalizer fitted for"):
            F.apply_normalizer(state, np.zeros((2, 36)), F.imu_schema())

    def test_dict_round_trip(self):
        state = F.fit_normalizer([np.random.default_rng(0).normal(size=(4, 12))], F.imu_schema(["gyroscope"]))
        back = F.NormalizerState.from_dict(state.to_dict())
        np.testing.assert_array_equal(back.lo, state.lo)
        np.testing.assert_array_equal(back.hi, state.hi)


def test_schema_widths():
    assert F.FULL_KEYSTROKE.channels == 10
    assert F.HUMIDB_KEYSTROKE.channels == 3
    assert F.imu_schema().channels == 36
    assert F.imu_schema(["magnetometer"]).channels == 12
