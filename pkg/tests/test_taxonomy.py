import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlsed.taxonomy import (
    ACC_CLASSES,
    EVENT_CLASSES,
    AccLabel,
    EventLabel,
    TaxonomyError,
    TaxonomyMap,
    duration_category,
    duration_statistics,
    load_taxonomy,
    project_labels,
    proposed_map,
    randomized_map,
    resolve_taxonomy,
    save_taxonomy,
)


def test_event_vocabulary_is_alphabetical_and_complete():
    assert len(EVENT_CLASSES) == 10
    assert list(EVENT_CLASSES) == sorted(EVENT_CLASSES)
    assert ACC_CLASSES == ("A", "B", "C", "D")


def test_proposed_groups():
    groups = proposed_map().groups()
    assert groups["A"] == ("Blender", "Frying", "Vacuum_cleaner")
    assert groups["B"] == ("Electric_shaver_toothbrush", "Running_water")
    assert groups["C"] == ("Cat", "Dog", "Speech")
    assert groups["D"] == ("Alarm_bell_ringing", "Dishes")


def test_randomized_groups():
    groups = randomized_map().groups()
    assert groups["A"] == ("Alarm_bell_ringing", "Blender", "Electric_shaver_toothbrush")
    assert groups["B"] == ("Dog", "Vacuum_cleaner")
    assert groups["C"] == ("Dishes", "Frying", "Speech")
    assert groups["D"] == ("Cat", "Running_water")


def test_maps_are_total_and_onto():
    for factory in (proposed_map, randomized_map):
        tmap = factory()
        assert set(tmap.mapping) == set(EVENT_CLASSES)
        assert set(tmap.mapping.values()) == set(ACC_CLASSES)


def test_unknown_class_lookup_raises():
    with pytest.raises(TaxonomyError):
        proposed_map()("Helicopter")


def test_partial_taxonomy_rejected(tmp_path):
    path = tmp_path / "partial.tsv"
    path.write_text("Dog\tC\n")
    with pytest.raises(TaxonomyError):
        load_taxonomy(path)


def test_event_label_validation():
    with pytest.raises(ValueError):
        EventLabel("c", "Dog", 2.0, 1.0)
    with pytest.raises(ValueError):
        EventLabel("c", "Dog", -0.5, 1.0)
    lab = EventLabel("c", "Dog", 1.0, 2.5)
    assert lab.duration == pytest.approx(1.5)


def test_project_merges_overlapping_same_group():
    labels = [
        EventLabel("clip", "Frying", 0.0, 4.0),
        EventLabel("clip", "Blender", 3.0, 6.0),
    ]
    assert project_labels(labels, proposed_map()) == [AccLabel("clip", "A", 0.0, 6.0)]


def test_project_merges_touching_keeps_disjoint():
    labels = [
        EventLabel("clip", "Dog", 0.0, 1.0),
        EventLabel("clip", "Cat", 1.0, 2.0),  # touches: merge
        EventLabel("clip", "Speech", 5.0, 6.0),  # gap: separate
        EventLabel("clip", "Dishes", 0.5, 1.5),  # other group: separate
    ]
    out = project_labels(labels, proposed_map())
    assert out == [
        AccLabel("clip", "C", 0.0, 2.0),
        AccLabel("clip", "D", 0.5, 1.5),
        AccLabel("clip", "C", 5.0, 6.0),
    ]


def test_project_keeps_clips_separate():
    labels = [
        EventLabel("a", "Dog", 0.0, 1.0),
        EventLabel("b", "Cat", 0.5, 1.5),
    ]
    out = project_labels(labels, proposed_map())
    assert {l.clip_id for l in out} == {"a", "b"}
    assert len(out) == 2


event_label_lists = st.lists(
    st.tuples(
        st.sampled_from(["c1", "c2"]),
        st.sampled_from(EVENT_CLASSES),
        st.floats(0, 50, allow_nan=False),
        st.floats(0.25, 10, allow_nan=False),
    ).map(lambda t: EventLabel(t[0], t[1], t[2], t[2] + t[3])),
    min_size=1,
    max_size=20,
)


@settings(max_examples=200, deadline=None)
@given(event_label_lists)
def test_projected_intervals_disjoint_and_sorted(labels):
    out = project_labels(labels, proposed_map())
    per_group: dict[tuple[str, str], list[AccLabel]] = {}
    for lab in out:
        per_group.setdefault((lab.clip_id, lab.klass), []).append(lab)
    for group in per_group.values():
        group.sort(key=lambda l: l.onset)
        for a, b in zip(group, group[1:]):
            assert a.offset < b.onset  # strictly disjoint, no touching left
    assert out == sorted(out, key=lambda l: (l.clip_id, l.onset, l.klass))


@settings(max_examples=100, deadline=None)
@given(event_label_lists)
def test_projection_preserves_total_coverage(labels):
    """Union of projected intervals equals union of inputs, per clip."""

    def union_length(intervals):
        intervals = sorted(intervals)
        total, cur_end = 0.0, -1.0
        for a, b in intervals:
            if a > cur_end:
                total += b - a
                cur_end = b
            elif b > cur_end:
                total += b - cur_end
                cur_end = b
        return total

    out = project_labels(labels, proposed_map())
    for clip in {l.clip_id for l in labels}:
        want = union_length([(l.onset, l.offset) for l in labels if l.clip_id == clip])
        got = union_length([(l.onset, l.offset) for l in out if l.clip_id == clip])
        assert got == pytest.approx(want, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(event_label_lists)
def test_identity_projection_is_idempotent_merge(labels):
    """With a map sending every class to itself, projecting twice == once."""
    ident = TaxonomyMap("identity", {c: c for c in EVENT_CLASSES})
    once = project_labels(labels, ident)
    again = project_labels(
        [EventLabel(l.clip_id, l.klass, l.onset, l.offset) for l in once], ident
    )
    assert again == once


def test_duration_category_threshold():
    assert duration_category(3.0) == "Long"
    assert duration_category(2.999) == "Short"
    assert duration_category(7.5) == "Long"
    assert duration_category(0.4) == "Short"
    with pytest.raises(ValueError):
        duration_category(0.0)


def test_duration_statistics():
    labels = [
        EventLabel("c", "Frying", 0.0, 6.0),
        EventLabel("c", "Frying", 0.0, 8.0),
        EventLabel("c", "Dishes", 0.0, 0.5),
    ]
    stats = duration_statistics(labels)
    assert stats["Frying"].mean == pytest.approx(7.0)
    assert stats["Frying"].median == pytest.approx(7.0)
    assert stats["Frying"].count == 2
    assert stats["Frying"].category == "Long"
    assert stats["Dishes"].category == "Short"


def test_tsv_round_trip(tmp_path):
    path = tmp_path / "map.tsv"
    save_taxonomy(proposed_map(), path)
    loaded = load_taxonomy(path)
    assert loaded.mapping == proposed_map().mapping


def test_resolve_by_name_and_path(tmp_path):
    assert resolve_taxonomy("proposed").mapping == proposed_map().mapping
    assert resolve_taxonomy("randomized").mapping == randomized_map().mapping
    path = tmp_path / "custom.tsv"
    save_taxonomy(randomized_map(), path)
    assert resolve_taxonomy(str(path)).mapping == randomized_map().mapping
    with pytest.raises(TaxonomyError):
        resolve_taxonomy("nonexistent")
