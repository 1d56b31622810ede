"""
Unit tests for marker_kernels.py - Per-agent marker computation.
"""

import math

import numpy as np
import pytest

from errors import ConfigurationError, EstimatorError, WindowError
from marker_kernels import (
    FRAME_DEPENDENT_MARKERS,
    MARKER_SET_23,
    MARKER_SET_42,
    PairwiseTE,
    Segment,
    SpatialContext,
    active_information_storage,
    compute_agent_markers,
    compute_segment_markers,
    cross_correlation,
    dba_stats,
    dtw_distance,
    effort_to_compress,
    heading_changes,
    kinematic_stats,
    largest_lyapunov,
    line_of_sight_obstructions,
    local_transfer_entropy,
    noise_to_signal,
    predation_risk,
    shannon_entropy,
    situation_awareness,
    spatial_context,
    spectral_entropy,
    symbolize,
    synchronicity,
    transfer_entropy,
    transfer_entropy_suite,
    validate_marker_set,
)


def _ctx(**kwargs) -> SpatialContext:
    base = dict(d_pi_beta=2.0, d_pi_gcm=1.0, d_gcm_beta=4.0, theta=0, bin_order=1, n_bins=5, omega_pipi=0)
    base.update(kwargs)
    return SpatialContext(**base)


class TestMarkerSets:
    """Test marker catalogue helpers."""

    def test_set_sizes(self):
        assert len(MARKER_SET_23) == 23 and MARKER_SET_23[-1] == "M23"
        assert len(MARKER_SET_42) == 42

    def test_rejects_unknown_and_duplicates(self):
        with pytest.raises(ConfigurationError):
            validate_marker_set(["M1", "M99"])
        with pytest.raises(ConfigurationError):
            validate_marker_set(["M1", "M1"])
        with pytest.raises(ConfigurationError):
            validate_marker_set([])


class TestSegment:
    """Test segment validation."""

    def test_rejects_bad_shape(self):
        with pytest.raises(WindowError):
            Segment(np.zeros((5, 3)))

    def test_heading_changes_wrap(self):
        steps = np.array([[1.0, 0.0], [-1.0, 1e-9], [1.0, 0.0]])
        turns = heading_changes(steps)
        assert np.all(turns > -math.pi) and np.all(turns <= math.pi)

    def test_stationary_steps_have_no_turn(self):
        steps = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        assert np.array_equal(heading_changes(steps), [0.0, 0.0])


class TestKinematics:
    """Test speed, distance and heading markers."""

    def test_stationary_agent(self, factory):
        seg = factory.create_segment([[[5.0, 5.0]] * 6])
        m = kinematic_stats(seg, 0)
        assert m["M1"] == m["M2"] == m["M3"] == m["M4"] == m["M14"] == 0.0

    def test_straight_line(self, factory):
        seg = factory.create_segment([[[float(t), 0.0] for t in range(6)]])
        m = kinematic_stats(seg, 0)
        assert m["M3"] == pytest.approx(1.0)
        assert m["M4"] == pytest.approx(0.0)
        assert m["M6"] == pytest.approx(0.0, abs=1e-12)
        assert m["M1"] == pytest.approx(m["M2"])

    def test_unit_square(self, factory):
        seg = factory.create_segment([[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]])
        m = kinematic_stats(seg, 0)
        assert m["M14"] == pytest.approx(math.pi / 2)
        assert m["M2"] == pytest.approx(4 / 4)
        assert m["M1"] == pytest.approx(0.0)

    def test_shepherd_distance_markers(self, factory):
        seg = factory.create_segment([[[0.0, 0.0]] * 3], shepherd=[[3.0, 4.0], [6.0, 8.0], [0.0, 1.0]])
        m = kinematic_stats(seg, 0)
        assert (m["M19"], m["M20"]) == (10.0, 1.0)
        assert m["M17"] == pytest.approx(16 / 3)

    def test_needs_three_ticks(self, factory):
        seg = factory.create_segment([[[0.0, 0.0], [1.0, 0.0]]])
        with pytest.raises(WindowError):
            kinematic_stats(seg, 0)


class TestBodyAcceleration:
    """Test dynamic body acceleration markers."""

    def test_constant_velocity(self, factory):
        seg = factory.create_segment([[[2.0 * t, -t] for t in range(7)]])
        m = dba_stats(seg, 0)
        assert m["M11"] == pytest.approx(0.0) and m["M12"] == pytest.approx(0.0) and m["M13"] == pytest.approx(0.0)

    def test_single_unit_kick(self, factory):
        seg = factory.create_segment([[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]])
        m = dba_stats(seg, 0)
        assert m["M13"] == pytest.approx(1.0)
        assert m["M11"] == pytest.approx(1 / 3)

    def test_cumulative_grows_with_window(self, factory):
        path = factory.random_walk(n_ticks=30, n_sheep=1, seed=4)[:, 0]
        totals = [dba_stats(factory.create_segment([path[:k]]), 0)["M13"] for k in range(3, 31)]
        assert all(b >= a - 1e-9 for a, b in zip(totals, totals[1:]))

    def test_overall_dba_adds_over_concatenated_windows(self, factory):
        path = factory.random_walk(n_ticks=40, n_sheep=1, seed=5)[:, 0]
        whole = dba_stats(factory.create_segment([path]), 0)["M13"]
        for cut in (2, 13, 25, 38):
            # halves share two ticks so every interior acceleration is counted once
            head = dba_stats(factory.create_segment([path[: cut + 1]]), 0)["M13"]
            tail = dba_stats(factory.create_segment([path[cut - 1:]]), 0)["M13"]
            assert head + tail == pytest.approx(whole, rel=1e-12)


class TestSpatialMarkers:
    """Test situation awareness, obstruction and predation risk."""

    def test_no_other_agents(self):
        assert line_of_sight_obstructions(np.array([[0.0, 0.0]]), 0, np.array([10.0, 0.0])) == 0

    def test_blocker_at_midpoint(self):
        positions = np.array([[0.0, 0.0], [5.0, 0.0]])
        assert line_of_sight_obstructions(positions, 0, np.array([10.0, 0.0])) == 1

    def test_sheep_displaced_by_repulsion_radius(self):
        positions = np.array([[0.0, 0.0], [5.0, 2.0]])
        assert line_of_sight_obstructions(positions, 0, np.array([10.0, 0.0]), r_agent_repulse=2.0) == 0

    def test_unobstructed_awareness_is_one(self):
        assert situation_awareness(_ctx(theta=0, d_pi_beta=100.0)) == 1.0

    def test_awareness_hand_value(self):
        assert situation_awareness(_ctx(theta=1)) == pytest.approx(0.5)

    def test_awareness_decreases_with_obstruction(self):
        values = [situation_awareness(_ctx(theta=t)) for t in range(0, 50)]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert values[-1] > 0

    def test_bin_count(self):
        positions = np.column_stack([np.arange(20.0), np.zeros(20)])
        ctx = spatial_context(positions, np.array([-10.0, 0.0]), 0)
        assert ctx.n_bins == 5
        assert ctx.bin_order == 1
        far = spatial_context(positions, np.array([-10.0, 0.0]), 19)
        assert far.bin_order == 5

    def test_equal_distances_share_first_bin(self):
        angles = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        ring = 10 * np.column_stack([np.cos(angles), np.sin(angles)])
        assert spatial_context(ring, np.zeros(2), 3).bin_order == 1

    def test_predation_hand_values(self):
        assert predation_risk(_ctx(bin_order=1, omega_pipi=0), 20) == pytest.approx(20.0)
        assert predation_risk(_ctx(bin_order=5, omega_pipi=3), 20) == pytest.approx(1.0)

    def test_predation_decreases_with_crowding_and_bin(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            n = int(rng.integers(1, 60))
            bin_order = int(rng.integers(1, 9))
            risks = [predation_risk(_ctx(bin_order=bin_order, omega_pipi=w), n) for w in range(30)]
            assert all(b < a for a, b in zip(risks, risks[1:]))
            by_bin = [predation_risk(_ctx(bin_order=o, omega_pipi=2), n) for o in range(1, 10)]
            assert all(b < a for a, b in zip(by_bin, by_bin[1:]))
            assert predation_risk(_ctx(bin_order=1, omega_pipi=0), n) == n


class TestCrossCorrelation:
    """Test lagged correlation."""

    def test_self_and_negation(self):
        x = np.random.default_rng(0).normal(size=40)
        assert cross_correlation(x, x, 3)[3] == pytest.approx(1.0)
        assert cross_correlation(x, -x, 3)[3] == pytest.approx(-1.0)

    def test_peak_at_shift(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=60)
        s = 3
        y = np.concatenate([rng.normal(size=s), x[:-s]])
        coeffs = cross_correlation(x, y, 5)
        assert int(np.argmax(coeffs)) - 5 == s

    def test_constant_gives_zero(self):
        assert np.all(cross_correlation(np.ones(10), np.arange(10.0), 2) == 0)


class TestSymbolize:
    """Test equal-width symbolization."""

    def test_constant(self):
        assert np.array_equal(symbolize([2.0] * 5, 3), [0] * 5)

    def test_ramp_two_bins(self):
        assert np.array_equal(symbolize([0.0, 1.0, 2.0, 3.0], 2), [0, 0, 1, 1])

    def test_known_three_bins(self):
        assert np.array_equal(symbolize([0.0, 0.5, 1.0, 2.9, 3.0], 3), [0, 0, 1, 2, 2])

    def test_needs_two_bins(self):
        with pytest.raises(ConfigurationError):
            symbolize([1.0, 2.0], 1)


class TestTransferEntropy:
    """Test transfer entropy and synchronicity."""

    def test_copy_process_carries_one_bit(self):
        x = np.random.default_rng(0).integers(0, 2, size=10_000)
        y = np.roll(x, 1)
        assert transfer_entropy(x, y) == pytest.approx(1.0, abs=0.05)
        assert transfer_entropy(y, x) < 0.01

    def test_independent_series_near_zero(self):
        rng = np.random.default_rng(2)
        assert transfer_entropy(rng.integers(0, 3, 10_000), rng.integers(0, 3, 10_000)) < 0.01

    def test_local_values_length(self):
        assert len(local_transfer_entropy([0, 1, 0, 1], [1, 1, 0, 0])) == 3

    def test_length_mismatch(self):
        with pytest.raises(EstimatorError):
            local_transfer_entropy([0, 1, 0], [0, 1])

    def test_net_is_antisymmetric(self):
        pair = PairwiseTE(te_fwd=0.3, te_rev=0.1)
        flipped = PairwiseTE(te_fwd=0.1, te_rev=0.3)
        assert pair.net == pytest.approx(-flipped.net)
        assert pair.tot == flipped.tot

    def test_synchronicity_cases(self):
        assert synchronicity(PairwiseTE(0.2, 0.2)) == 0.0
        assert synchronicity(PairwiseTE(0.5, 0.1)) == pytest.approx(0.6)
        assert synchronicity(PairwiseTE(0.1, 0.5)) == pytest.approx(-0.6)

    def test_copy_process_synchronicity_positive(self):
        x = np.random.default_rng(3).integers(0, 2, size=2_000)
        y = np.roll(x, 1)
        assert PairwiseTE(transfer_entropy(x, y), transfer_entropy(y, x)).sync > 0

    def test_suite_external_net_mirrors_net(self, factory):
        seg = Segment(factory.random_walk(n_ticks=30, n_sheep=3, seed=5))
        m = transfer_entropy_suite(seg, 1)
        assert m["M30"] == pytest.approx(-m["M23"])
        assert m["M31"] >= m["M27"] - 1e-12


class TestStorageAndEntropy:
    """Test storage, compression and entropy estimators."""

    def test_constant_symbols(self):
        sym = np.zeros(50, dtype=int)
        assert shannon_entropy(sym) == 0.0
        assert active_information_storage(sym) == pytest.approx(0.0)
        assert effort_to_compress(sym) == 0

    def test_uniform_four_symbols(self):
        sym = np.random.default_rng(0).integers(0, 4, size=20_000)
        assert shannon_entropy(sym) == pytest.approx(2.0, abs=0.01)

    def test_alternating_storage(self):
        assert active_information_storage(np.arange(1000) % 2) == pytest.approx(1.0, abs=1e-3)

    def test_effort_to_compress_passes(self):
        assert effort_to_compress([1, 2, 1, 2]) == 1
        assert effort_to_compress([0, 1]) == 1
        assert effort_to_compress([0, 1, 1, 0]) > 1

    def test_spectral_entropy(self):
        t = np.arange(256)
        tone = spectral_entropy(np.sin(2 * np.pi * t / 16))
        noise = spectral_entropy(np.random.default_rng(0).normal(size=256))
        assert spectral_entropy(np.ones(20)) == 0.0
        assert tone < noise


class TestTimeSeries:
    """Test DTW, Lyapunov and noise-to-signal."""

    def test_dtw_identity_and_symmetry(self):
        x = np.random.default_rng(0).normal(size=15)
        y = np.random.default_rng(1).normal(size=11)
        assert dtw_distance(x, x) == 0.0
        assert dtw_distance(x, y) == pytest.approx(dtw_distance(y, x))

    def test_dtw_hand_value(self):
        assert dtw_distance([0.0, 1.0, 2.0], [0.0, 2.0]) == pytest.approx(1.0)

    def test_logistic_map_exponent(self):
        x = np.empty(2100)
        x[0] = 0.1234
        for t in range(1, len(x)):
            x[t] = 4.0 * x[t - 1] * (1.0 - x[t - 1])
        mean, _ = largest_lyapunov(x[100:])
        assert mean == pytest.approx(math.log(2), rel=0.25)

    def test_constant_series_exponent_zero(self):
        assert largest_lyapunov(np.ones(30)) == (0.0, 0.0)

    def test_short_series_rejected(self):
        with pytest.raises(WindowError):
            largest_lyapunov(np.arange(5.0))

    def test_ramp_has_no_noise(self):
        assert np.allclose(noise_to_signal(np.arange(20.0)), 0.0)

    def test_noise_to_signal_needs_three_samples(self):
        with pytest.raises(WindowError):
            noise_to_signal([1.0, 2.0])


class TestAssembly:
    """Test marker vector assembly."""

    def test_short_window_masks_unavailable_groups(self, factory):
        seg = Segment(factory.random_walk(n_ticks=3, n_sheep=2, seed=0))
        values = compute_agent_markers(seg, 0, MARKER_SET_42)
        idx = {m: j for j, m in enumerate(MARKER_SET_42)}
        assert not np.isnan(values[idx["M1"]])
        assert np.isnan(values[idx["M23"]])
        assert np.isnan(values[idx["M37"]])

    def test_segment_shape(self, factory):
        seg = Segment(factory.random_walk(n_ticks=20, n_sheep=3, seed=1))
        assert compute_segment_markers(seg, MARKER_SET_23).shape == (3, 23)

    def test_rigid_motion_invariance(self, short_trajectory):
        window = short_trajectory.positions[:20]
        c, s = math.cos(0.6), math.sin(0.6)
        moved = window @ np.array([[c, s], [-s, c]]) + np.array([37.0, -12.0])
        a = compute_segment_markers(Segment(window), MARKER_SET_42)
        b = compute_segment_markers(Segment(moved), MARKER_SET_42)
        # M13 sums |a_x| + |a_y|, which depends on the axes
        keep = [j for j, m in enumerate(MARKER_SET_42) if m not in FRAME_DEPENDENT_MARKERS | {"M13"}]
        assert np.allclose(a[:, keep], b[:, keep], rtol=1e-9, atol=1e-9, equal_nan=True)

    def test_overall_dba_survives_quarter_turns(self, short_trajectory):
        window = short_trajectory.positions[:20]
        turned = np.stack([-window[..., 1], window[..., 0]], axis=-1)
        j = MARKER_SET_42.index("M13")
        a = compute_segment_markers(Segment(window), MARKER_SET_42)[:, j]
        b = compute_segment_markers(Segment(turned), MARKER_SET_42)[:, j]
        assert np.allclose(a, b, rtol=1e-12, atol=0)
