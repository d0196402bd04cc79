"""Tests for thresholding, median filtering, and event extraction."""

import numpy as np
import pytest

from mbsed.events import EventAnnotation
from mbsed.postprocess import (
    PostConfig,
    adaptive_window,
    binarize,
    extract_events,
    median_filter,
    probs_to_events,
    round_up_to_odd,
)


def median_pass_loops(seq, window):
    """Per-position single pass: explicit edge padding and python median."""
    half = window // 2
    padded = [seq[0]] * half + list(seq) + [seq[-1]] * half
    out = []
    for t in range(len(seq)):
        block = sorted(padded[t : t + window])
        out.append(block[len(block) // 2])
    return np.array(out)


def median_filter_loops(seq, window):
    """Oracle: repeat single passes until the sequence stops changing."""
    current = np.asarray(seq)
    while True:
        filtered = median_pass_loops(current, window)
        if np.array_equal(filtered, current):
            return filtered
        current = filtered


class TestBinarize:
    def test_strictly_above(self):
        np.testing.assert_array_equal(binarize(np.array([0.4, 0.6]), 0.5), [0, 1])

    def test_boundary_is_strict(self):
        np.testing.assert_array_equal(binarize(np.array([0.5]), 0.5), [0])

    def test_all_zero(self):
        np.testing.assert_array_equal(binarize(np.zeros(5), 0.5), np.zeros(5))

    def test_matrix_input(self):
        probs = np.array([[0.2, 0.9], [0.7, 0.1]])
        np.testing.assert_array_equal(binarize(probs, 0.5), [[0, 1], [1, 0]])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="0, 1"):
            binarize(np.array([1.2]), 0.5)
        with pytest.raises(ValueError, match="0, 1"):
            binarize(np.array([-0.1]), 0.5)


class TestMedianFilter:
    def test_removes_isolated_spike(self):
        np.testing.assert_array_equal(
            median_filter(np.array([0, 0, 1, 0, 0]), 3), [0, 0, 0, 0, 0]
        )

    def test_fills_gap(self):
        np.testing.assert_array_equal(
            median_filter(np.array([1, 1, 0, 1, 1]), 3), [1, 1, 1, 1, 1]
        )

    def test_window_one_is_identity(self):
        seq = np.array([1, 0, 1, 1, 0])
        np.testing.assert_array_equal(median_filter(seq, 1), seq)

    def test_rejects_even_window(self):
        with pytest.raises(ValueError, match="odd"):
            median_filter(np.zeros(4), 4)

    def test_alternating_run_reaches_fixed_point(self):
        # one pass of [1,0,1,0,1] gives [1,1,0,1,1] which still changes;
        # the filter keeps going until stable
        out = median_filter(np.array([1, 0, 1, 0, 1]), 3)
        np.testing.assert_array_equal(out, [1, 1, 1, 1, 1])
        np.testing.assert_array_equal(median_filter(out, 3), out)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            seq = (rng.random(n) < 0.5).astype(np.int8)
            for window in (1, 3, 5, 7):
                got = median_filter(seq, window)
                np.testing.assert_array_equal(got, median_filter_loops(seq, window))

    def test_idempotent_window3(self):
        rng = np.random.default_rng(1)
        for i in range(1000):
            n = int(rng.integers(1, 60))
            if i % 2:
                seq = (rng.random(n) < rng.random()).astype(np.int8)
            else:
                seq = rng.random(n)
            once = median_filter(seq, 3)
            twice = median_filter(once, 3)
            np.testing.assert_array_equal(once, twice)

    def test_edge_replication_keeps_plateau(self):
        np.testing.assert_array_equal(median_filter(np.array([1, 1, 0]), 3), [1, 1, 0])


class TestRoundUpToOdd:
    @pytest.mark.parametrize("x,want", [(1.0, 1), (2.0, 3), (2.9, 3), (3.0, 3), (4.0, 5), (27.0, 27), (0.5, 1)])
    def test_values(self, x, want):
        assert round_up_to_odd(x) == want


class TestAdaptiveWindow:
    def test_third_of_median_duration(self):
        # 1.62 s events at 20 ms hop: 1.62/0.02/3 = 27 frames
        assert adaptive_window(1.62, 0.02) == 27

    def test_clamped_low(self):
        assert adaptive_window(0.05, 0.02) == 3

    def test_clamped_high(self):
        assert adaptive_window(8.0, 0.02) == 51

    def test_always_odd_in_range(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            w = adaptive_window(float(rng.uniform(0.01, 10.0)), 0.02)
            assert w % 2 == 1 and 3 <= w <= 51

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            adaptive_window(0.0, 0.02)


class TestExtractEvents:
    def test_single_run(self):
        events = extract_events(np.array([0, 1, 1, 1, 0]), 0.02, "A", "c")
        assert len(events) == 1
        assert (events[0].clip_id, events[0].label) == ("c", "A")
        assert events[0].onset == pytest.approx(0.02)
        assert events[0].offset == pytest.approx(0.08)

    def test_all_zeros(self):
        assert extract_events(np.zeros(10), 0.02, "A", "c") == []

    def test_two_runs(self):
        events = extract_events(np.array([1, 0, 1]), 0.5, "A", "c")
        assert [(e.onset, e.offset) for e in events] == [(0.0, 0.5), (1.0, 1.5)]

    def test_run_to_sequence_end(self):
        events = extract_events(np.array([0, 0, 1, 1]), 1.0, "A", "c")
        assert [(e.onset, e.offset) for e in events] == [(2.0, 4.0)]

    def test_sorted_by_onset(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            seq = (rng.random(50) < 0.4).astype(np.int8)
            events = extract_events(seq, 0.02, "A", "c")
            onsets = [e.onset for e in events]
            assert onsets == sorted(onsets)

    def test_round_trip_hop_aligned(self):
        rng = np.random.default_rng(4)
        hop = 0.02
        for _ in range(200):
            seq = (rng.random(int(rng.integers(1, 80))) < 0.35).astype(np.int8)
            events = extract_events(seq, hop, "A", "c")
            rebuilt = np.zeros_like(seq)
            for e in events:
                i = int(round(e.onset / hop))
                j = int(round(e.offset / hop))
                rebuilt[i:j] = 1
            np.testing.assert_array_equal(seq, rebuilt)
            again = extract_events(rebuilt, hop, "A", "c")
            assert events == again


class TestThresholdMonotonicity:
    def test_raising_threshold_shrinks_events(self):
        # higher threshold: every event is contained in a lower-threshold
        # event, activation never appears where there was none
        rng = np.random.default_rng(5)
        for _ in range(1000):
            probs = rng.random(int(rng.integers(1, 60)))
            lo, hi = sorted(rng.uniform(0.05, 0.95, 2))
            ev_lo = extract_events(binarize(probs, lo), 1.0, "A", "c")
            ev_hi = extract_events(binarize(probs, hi), 1.0, "A", "c")
            spans_lo = [(e.onset, e.offset) for e in ev_lo]
            total_lo = sum(e.duration for e in ev_lo)
            total_hi = sum(e.duration for e in ev_hi)
            assert total_hi <= total_lo + 1e-12
            for e in ev_hi:
                assert any(a <= e.onset and e.offset <= b for a, b in spans_lo)


class TestPostConfig:
    def test_defaults(self):
        cfg = PostConfig()
        assert cfg.threshold == 0.5
        assert cfg.window_for("anything") == 27

    def test_per_class_windows(self):
        cfg = PostConfig(median_windows={"dog": 5})
        assert cfg.window_for("dog") == 5
        assert cfg.window_for("cat") == 27

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError, match="threshold"):
            PostConfig(threshold=1.0)

    def test_rejects_even_window(self):
        with pytest.raises(ValueError, match="odd"):
            PostConfig(median_windows={"dog": 4})

    def test_tag_threshold_bounds(self):
        assert PostConfig(tag_threshold=0.0).tag_threshold == 0.0
        assert PostConfig(tag_threshold=0.9).tag_threshold == 0.9
        with pytest.raises(ValueError, match="tag_threshold"):
            PostConfig(tag_threshold=1.0)
        with pytest.raises(ValueError, match="tag_threshold"):
            PostConfig(tag_threshold=-0.1)


class TestProbsToEvents:
    def test_two_class_matrix(self):
        probs = np.zeros((40, 2))
        probs[5:20, 0] = 0.9
        probs[10:30, 1] = 0.8
        events = probs_to_events(probs, 0.02, ["A", "B"], PostConfig(default_window=3))
        assert {(e.label, round(e.onset, 2), round(e.offset, 2)) for e in events} == {
            ("A", 0.1, 0.4),
            ("B", 0.2, 0.6),
        }

    def test_median_window_removes_blips(self):
        probs = np.zeros((40, 1))
        probs[7, 0] = 0.9  # single-frame spike
        probs[15:32, 0] = 0.9
        events = probs_to_events(probs, 0.02, ["A"], PostConfig(default_window=5))
        assert len(events) == 1
        assert events[0].onset == pytest.approx(0.3)

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="shape"):
            probs_to_events(np.zeros((10, 3)), 0.02, ["A", "B"])

    def test_clip_id_propagates(self):
        probs = np.ones((10, 1)) * 0.9
        events = probs_to_events(probs, 0.02, ["A"], PostConfig(default_window=3), clip_id="x9")
        assert all(e.clip_id == "x9" for e in events)
