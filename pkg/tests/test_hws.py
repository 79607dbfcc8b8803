import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnbench.hws import (
    FrameWeight,
    FrameWeightTable,
    SequenceWindow,
    WeightFunction,
    assign_weights,
    boundary_frame_counts,
    boundary_mask,
    cap_and_normalize,
    enumerate_windows,
    fit_weight_function,
    frame_divergences,
    sample_windows,
)
from attnbench.maps import ClipSequence, normalize
from attnbench.metrics import kl_divergence
from attnbench.maps import mean_map


def table_from(weights_by_clip):
    return FrameWeightTable([FrameWeight(c, i, 0.0, float(w))
                             for c, ws in weights_by_clip.items() for i, w in enumerate(ws)])


def peaked(h=9, w=16, at=(0, 0), floor=1e-4):
    g = np.full((h, w), floor)
    g[at] = 1.0
    return g


# -- divergences -------------------------------------------------------------------


def test_identical_frames_zero_divergence():
    m = normalize(np.random.default_rng(0).random((4, 4)))
    assert [d for _, d in frame_divergences(ClipSequence("c", (m,) * 4))] == [0.0] * 4


def test_peaked_frame_has_max_divergence():
    frames = [np.ones((9, 16))] * 10 + [peaked()]
    clip = ClipSequence.from_array("c", frames)
    divs = frame_divergences(clip)
    assert max(divs, key=lambda p: p[1])[0] == 10
    assert all(d < divs[10][1] for _, d in divs[:10])
    mu = mean_map(clip)
    assert [d for _, d in divs] == [kl_divergence(m, mu) for m in clip.maps]


def test_single_frame_clip_rejected():
    with pytest.raises(ValueError, match="2 frames"):
        frame_divergences(ClipSequence.from_array("c", [np.ones((2, 2))]))


# -- weight function ---------------------------------------------------------------


def test_uniform_histogram_gives_constant_middle():
    d = np.repeat(1.05 + 0.1 * np.arange(20), 50)
    wf = fit_weight_function(d)
    np.testing.assert_allclose(wf.inverse_hist, 1.0)


def test_inverse_count_ratio():
    d = np.concatenate([np.full(100, 1.5), np.full(10, 2.5)])
    wf = fit_weight_function(d, bin_width=1.0, w_low=0.2)
    np.testing.assert_allclose(wf.inverse_hist, [1.0, 10.0])
    assert wf(2.5) / wf(1.5) == pytest.approx(10.0)
    assert wf(0.5) == 0.2
    assert wf(3.5) == 10.0  # right plateau continues the last bin


def test_all_low_divergence_is_an_error():
    with pytest.raises(ValueError, match="empty range"):
        fit_weight_function(np.linspace(0, 0.99, 50))


def test_junction_monotonicity_checks():
    d = np.concatenate([np.full(100, 1.5), np.full(10, 2.5)])
    with pytest.raises(ValueError, match="w_low"):
        fit_weight_function(d, bin_width=1.0, w_low=2.0)
    with pytest.raises(ValueError, match="w_high"):
        fit_weight_function(d, bin_width=1.0, w_high=5.0)
    with pytest.raises(ValueError):
        fit_weight_function(d, bin_width=0.3)


def test_empty_bins_borrow_neighbours():
    d = np.concatenate([np.full(40, 1.05), np.full(10, 1.25)])  # bin 1 empty
    wf = fit_weight_function(d)
    assert wf.inverse_hist[1] == pytest.approx(40 / 25)
    assert np.all(np.isfinite(wf.inverse_hist))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(5, 200), elements=st.floats(0.0, 6.0)))
def test_weight_function_shape(d):
    if not np.any((d >= 1) & (d < 3)):
        return
    wf = fit_weight_function(d, w_low=1e-3)
    probes = np.linspace(0, 6, 241)
    w = wf(probes)
    assert np.all(w[probes < 1] == wf.w_low)
    assert np.all(w[probes > 3] == wf.w_high)
    assert wf.w_low <= wf(1.0)
    assert wf(3.0) <= wf.w_high
    assert np.all(w > 0)


# -- boundary caps and normalization ------------------------------------------------


def test_boundary_counts():
    assert boundary_frame_counts(3.0, 1.0, 0.5) == (3, 2)
    assert boundary_frame_counts(30.0, 1.0, 0.5) == (30, 15)
    assert boundary_frame_counts(1.0, 1.0, 0.5) == (1, 1)
    np.testing.assert_array_equal(boundary_mask(8, 3.0, 1.0, 0.5),
                                  [1, 1, 1, 0, 0, 0, 1, 1])


def test_all_zero_divergence_gives_unit_weights():
    m = normalize(np.random.default_rng(1).random((4, 4)))
    clips = [ClipSequence(f"c{k}", (m,) * 9) for k in range(3)]
    wf = WeightFunction(0.2, 1.0, 0.1, np.ones(20))
    table = assign_weights(clips, wf)
    assert [e.weight for e in table.entries] == [1.0] * 27


def test_head_frame_is_capped_at_one():
    frames = [peaked()] + [np.ones((9, 16))] * 39
    clip = ClipSequence.from_array("c", frames)
    assert frame_divergences(clip)[0][1] > 3
    wf = WeightFunction(0.2, 50.0, 1.0, np.array([1.0, 2.0]))
    table = assign_weights([clip], wf)
    w = table.weights_for("c")
    assert w[0] == 1.0
    assert np.mean(w) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0.0, 100.0)), st.data())
def test_cap_and_normalize_fixed_point(raw, data):
    if not np.any(raw > 0):
        return
    capped = data.draw(arrays(np.bool_, raw.shape))
    out = cap_and_normalize(raw, capped)
    assert np.all(out >= 0)
    assert np.all(out[capped] <= 1 + 1e-9)
    if out.mean() < 1 - 1e-9:
        # mean 1 unreachable only when every positive entry is capped at 1
        assert np.all(out[raw > 0] == 1.0) and np.all(capped[raw > 0])
    else:
        assert out.mean() == pytest.approx(1.0, abs=1e-9)
    # the result is a fixed point of clip-at-1 followed by rescale-to-mean-1
    free = ~capped | (out < 1 - 1e-9)
    # proportionality is scale-free; entries whose scaled value is subnormal
    # carry no relative precision, so they are left out of the ratio check
    scaled = raw / raw.max()
    check = free & (scaled >= np.finfo(np.float64).tiny)
    ratio = out[check] / scaled[check]
    if ratio.size:
        assert np.ptp(ratio) <= 1e-9 * ratio.max()


def test_iterative_scheme_converges_to_exact_solution():
    rng = np.random.default_rng(2)
    raw = rng.gamma(0.5, 2.0, 200)
    capped = rng.random(200) < 0.3
    w = raw.copy()
    for _ in range(500):
        w = w * (len(w) / w.sum())
        w[capped] = np.minimum(w[capped], 1.0)
    np.testing.assert_allclose(cap_and_normalize(raw, capped), w, rtol=1e-6)


# -- windows -------------------------------------------------------------------------


def test_window_examples():
    assert enumerate_windows({"a": 6}, table_from({"a": [1] * 6})) == [SequenceWindow("a", 0, 6, 6.0)]
    two = enumerate_windows({"a": 7}, table_from({"a": [1] * 7}))
    assert [(w.start_frame, w.weight) for w in two] == [(0, 6.0), (1, 6.0)]
    spike = enumerate_windows({"a": 7}, table_from({"a": [0, 0, 0, 0, 0, 6, 0]}))
    assert [w.weight for w in spike] == [6.0, 6.0]


def test_short_clips_skipped_with_warning():
    with pytest.warns(UserWarning, match="skipped"):
        out = enumerate_windows({"a": 4, "b": 6}, table_from({"a": [1] * 4, "b": [1] * 6}))
    assert [w.clip_id for w in out] == ["b"]
    with pytest.raises(ValueError), pytest.warns(UserWarning):
        enumerate_windows({"a": 4}, table_from({"a": [1] * 4}))


def test_window_weight_is_member_sum():
    w = np.random.default_rng(3).random(20)
    for win in enumerate_windows({"a": 20}, table_from({"a": w})):
        assert win.weight == float(w[win.start_frame:win.start_frame + 6].sum())


def test_sampling_examples():
    one = [SequenceWindow("a", 0, 6, 2.0)]
    assert sample_windows(one, 5, 0) == one * 5
    pair = [SequenceWindow("a", 0, 6, 1.0), SequenceWindow("b", 0, 6, 3.0)]
    draws = sample_windows(pair, 100_000, 1)
    assert sum(d.clip_id == "b" for d in draws) / 100_000 == pytest.approx(0.75, abs=0.01)
    assert sample_windows(pair, 50, 9) == sample_windows(pair, 50, 9)
    with pytest.raises(ValueError):
        sample_windows([SequenceWindow("a", 0, 6, 0.0)], 3, 0)


def test_low_divergence_frames_still_sampled():
    d = np.concatenate([np.full(500, 0.1), np.linspace(1, 3, 500)])
    wf = fit_weight_function(d)
    assert np.all(wf(d) > 0)
