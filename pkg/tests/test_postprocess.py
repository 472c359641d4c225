import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlsed.postprocess import (
    BinarySequence,
    FilterLengths,
    PostprocessError,
    binarize,
    decode_clip,
    decode_events,
    load_filter_lengths,
    median_filter,
    rasterize_events,
    save_filter_lengths,
    search_filter_lengths,
)
from mtlsed.taxonomy import EventLabel

HOP = 0.064


def seq(bits):
    return BinarySequence(np.asarray(bits, dtype=np.int8), HOP)


def median_oracle(bits, window):
    """Sort-based centered median with explicit zero padding."""
    pad = window // 2
    padded = [0] * pad + list(bits) + [0] * pad
    out = []
    for i in range(len(bits)):
        neighborhood = sorted(padded[i : i + window])
        out.append(neighborhood[window // 2])
    return out


# ---- binarize ---------------------------------------------------------------

def test_binarize_zero_probs():
    tracks = binarize(np.zeros((10, 3)), 0.5, HOP)
    assert all(np.all(t.values == 0) for t in tracks)


def test_binarize_threshold_inclusive():
    probs = np.array([[0.4], [0.5], [0.6]])
    track = binarize(probs, 0.5, HOP)[0]
    assert list(track.values) == [0, 1, 1]


def test_binarize_per_class_thresholds():
    rng = np.random.default_rng(0)
    probs = rng.uniform(size=(50, 4))
    taus = [0.2, 0.5, 0.7, 0.9]
    tracks = binarize(probs, taus, HOP)
    for c, tau in enumerate(taus):
        alone = binarize(probs[:, [c]], tau, HOP)[0]
        assert np.array_equal(tracks[c].values, alone.values)


def test_binarize_rejects_degenerate_threshold():
    with pytest.raises(PostprocessError):
        binarize(np.zeros((5, 2)), 0.0, HOP)
    with pytest.raises(PostprocessError):
        binarize(np.zeros((5, 2)), 1.0, HOP)


# ---- median filter ----------------------------------------------------------

def test_median_window_one_is_identity():
    s = seq([0, 1, 1, 0, 1])
    assert median_filter(s, 1) is s


def test_median_pinned_example():
    out = median_filter(seq([0, 1, 0, 1, 1, 1, 0]), 3)
    assert list(out.values) == [0, 0, 1, 1, 1, 1, 0]


def test_median_all_ones_border_behavior():
    for window in (3, 5, 7):
        bits = [1] * 12
        out = median_filter(seq(bits), window)
        assert list(out.values) == median_oracle(bits, window)
        # interior stays one; zero padding eats the outermost window//4 edges
        pad = window // 2
        assert np.all(out.values[pad:-pad] == 1)


def test_median_even_window_rejected():
    with pytest.raises(PostprocessError):
        median_filter(seq([0, 1]), 4)


@settings(max_examples=300, deadline=None)
@given(
    bits=st.lists(st.integers(0, 1), min_size=1, max_size=64),
    window=st.sampled_from([1, 3, 5, 7]),
)
def test_median_matches_sort_oracle(bits, window):
    out = median_filter(seq(bits), window)
    assert list(out.values) == median_oracle(bits, window)
    assert len(out.values) == len(bits)
    assert set(np.unique(out.values)) <= {0, 1}


def test_median_removes_short_blips_fills_short_gaps():
    # isolated runs shorter than ceil(window/2) vanish in a zero context
    out = median_filter(seq([0, 0, 0, 1, 1, 0, 0, 0]), 5)
    assert list(out.values) == [0] * 8
    # gaps shorter than ceil(window/2) close in a one context
    out = median_filter(seq([1, 1, 1, 0, 0, 1, 1, 1]), 5)
    assert list(out.values[2:6]) == [1, 1, 1, 1]


# ---- decode / rasterize -------------------------------------------------------

def test_decode_all_zeros():
    assert decode_events(seq([0] * 20), "c", "Dog") == []


def test_decode_frame_times():
    bits = np.zeros(40, dtype=np.int8)
    bits[10:20] = 1
    events = decode_events(BinarySequence(bits, 0.016), "c", "Dog")
    assert len(events) == 1
    assert events[0].onset == pytest.approx(0.16)
    assert events[0].offset == pytest.approx(0.32)


def test_decode_two_runs_and_clip_limit():
    events = decode_events(seq([1, 1, 0, 1]), "c", "Cat", clip_seconds=0.2)
    assert len(events) == 2
    assert events[0].onset == 0.0 and events[0].offset == pytest.approx(2 * HOP)
    assert events[1].offset == pytest.approx(0.2)  # clipped from 4*hop=0.256


def test_rasterize_frame_rule():
    ev = EventLabel("c", "Dog", 0.1, 0.2)
    grid = rasterize_events([ev], hop_seconds=0.064, n_frames=10, class_order=("Dog",))
    # floor(0.1/0.064)=1, ceil(0.2/0.064)=4 -> frames 1..3
    assert list(grid[:, 0]) == [0, 1, 1, 1, 0, 0, 0, 0, 0, 0]


event_lists = st.lists(
    st.tuples(st.integers(0, 80), st.integers(1, 30)).map(
        lambda t: (t[0], t[0] + t[1])
    ),
    min_size=0,
    max_size=8,
)


@settings(max_examples=300, deadline=None)
@given(event_lists)
def test_decode_rasterize_identity_on_frame_aligned_events(frame_spans):
    """rasterize then decode returns the merged frame-aligned event list."""
    # merge overlapping/touching spans to get the canonical expectation
    spans = sorted(frame_spans)
    merged = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    n_frames = 120
    events = [EventLabel("c", "Dog", a * HOP, b * HOP) for a, b in merged]
    grid = rasterize_events(events, HOP, n_frames, ("Dog",))
    back = decode_events(BinarySequence(grid[:, 0], HOP), "c", "Dog")
    assert [(e.onset, e.offset) for e in back] == [
        (pytest.approx(a * HOP), pytest.approx(b * HOP)) for a, b in merged
    ]


# ---- filter length search ------------------------------------------------------

def make_tracks(active, n=80, noise=()):
    probs = np.full((n, 1), 0.1)
    for a, b in active:
        probs[a:b, 0] = 0.9
    for i in noise:
        probs[i, 0] = 0.9 if probs[i, 0] < 0.5 else 0.1
    return probs


def test_search_singleton_candidates():
    truth = [EventLabel("c", "Alarm_bell_ringing", 0.0, 10 * HOP)]
    lengths = search_filter_lengths(
        {"c": make_tracks([(0, 10)])},
        truth,
        HOP,
        candidates=[1],
        class_order=("Alarm_bell_ringing",),
    )
    assert lengths["Alarm_bell_ringing"] == 1


def test_search_clean_posteriors_pick_window_one():
    truth = [
        EventLabel("c", "Dog", 5 * HOP, 20 * HOP),
        EventLabel("c", "Dog", 40 * HOP, 44 * HOP),
    ]
    posteriors = {"c": make_tracks([(5, 20), (40, 44)])}
    lengths = search_filter_lengths(
        posteriors, truth, HOP, candidates=[1, 3, 5, 7], class_order=("Dog",)
    )
    assert lengths["Dog"] == 1


def test_search_prefers_smoothing_for_flippy_posteriors():
    # Isolated single-frame blips in the background never overlap the truth,
    # so at window 1 they survive as false positives; any window > 1 erases
    # them without touching the long event.
    truth = [EventLabel("c", "Dog", 10 * HOP, 30 * HOP)]
    posteriors = {"c": make_tracks([(10, 30)], noise=(40, 50, 60))}
    lengths = search_filter_lengths(
        posteriors, truth, HOP, candidates=[1, 3, 5], class_order=("Dog",)
    )
    assert lengths["Dog"] > 1


def test_search_matches_exhaustive_oracle():
    """Independent re-evaluation of every candidate agrees with the argmax."""
    rng = np.random.default_rng(3)
    hop = HOP
    truth = []
    posteriors = {}
    for clip in ("a", "b"):
        probs = np.full((60, 2), 0.15)
        for c, klass in enumerate(("Dog", "Cat")):
            a = int(rng.integers(0, 30))
            b = a + int(rng.integers(5, 25))
            probs[a:b, c] = 0.85
            truth.append(EventLabel(clip, klass, a * hop, b * hop))
            for i in rng.integers(0, 60, size=4):
                probs[i, c] = 1.0 - probs[i, c]
        posteriors[clip] = probs
    candidates = [1, 3, 5, 7, 9]
    lengths = search_filter_lengths(
        posteriors, truth, hop, candidates=candidates, class_order=("Dog", "Cat")
    )

    from mtlsed.postprocess import _intersection_f1

    for c, klass in enumerate(("Dog", "Cat")):
        scores = []
        for w in candidates:
            dets = []
            for clip, probs in posteriors.items():
                track = binarize(probs[:, [c]], 0.5, hop)[0]
                dets.extend(decode_events(median_filter(track, w), clip, klass))
            scores.append(
                _intersection_f1(dets, [g for g in truth if g.klass == klass], 0.7)
            )
        best = candidates[int(np.argmax(scores))]  # argmax takes first max = smallest
        assert lengths[klass] == best


def test_search_permutation_invariant():
    truth = [EventLabel("c", "Dog", 10 * HOP, 30 * HOP)]
    posteriors = {"c": make_tracks([(10, 30)], noise=(15, 25))}
    a = search_filter_lengths(posteriors, truth, HOP, [1, 3, 5, 7], class_order=("Dog",))
    b = search_filter_lengths(posteriors, truth, HOP, [7, 3, 1, 5], class_order=("Dog",))
    assert a.windows == b.windows


def test_search_validates_candidates():
    with pytest.raises(PostprocessError):
        search_filter_lengths({}, [], HOP, candidates=[])
    with pytest.raises(PostprocessError):
        search_filter_lengths({}, [], HOP, candidates=[1, 2])


def test_filter_lengths_validation_and_io(tmp_path):
    with pytest.raises(PostprocessError):
        FilterLengths({"Dog": 4})
    lengths = FilterLengths({"Dog": 7, "Cat": 1})
    path = tmp_path / "filters.tsv"
    save_filter_lengths(path, lengths)
    assert load_filter_lengths(path).windows == {"Dog": 7, "Cat": 1}
    assert lengths["unknown-class"] == 1  # default window


def test_decode_clip_chains_the_steps():
    probs = make_tracks([(10, 20)], noise=(40,))
    events = decode_clip(
        probs,
        "clip",
        thresholds=0.5,
        lengths=FilterLengths({"Dog": 3}),
        hop_seconds=HOP,
        clip_seconds=10.0,
        class_order=("Dog",),
    )
    assert len(events) == 1  # isolated flip at frame 40 smoothed away
    assert events[0].onset == pytest.approx(10 * HOP)
