import itertools
import json

import pytest

from vtlqubo.phases import (
    MOVEMENTS,
    Movement,
    SignalTiming,
    catalogue_to_json,
    compatible_pairs,
    movements_conflict,
    standard_phase_groups,
)

M = Movement.parse


def test_eight_distinct_movements():
    assert len(MOVEMENTS) == 8
    assert len({m.name for m in MOVEMENTS}) == 8


def test_catalogue_shape():
    groups = standard_phase_groups()
    assert len(groups) == 8
    assert [g.id for g in groups] == list(range(1, 9))
    assert len({frozenset(g.movements) for g in groups}) == 8
    assert any(set(g.movements) == {M("NT"), M("ST")} for g in groups)
    covered = {m for g in groups for m in g.movements}
    assert covered == set(MOVEMENTS)


def test_groups_are_compatible():
    for g in standard_phase_groups():
        a, b = g.movements
        assert not movements_conflict(a, b)


def test_catalogue_is_the_set_of_compatible_pairs():
    # the 8 groups are exactly the compatible distinct pairs
    assert {frozenset(p) for p in compatible_pairs()} == {
        frozenset(g.movements) for g in standard_phase_groups()
    }


@pytest.mark.parametrize(
    "a,b,expected",
    [("NT", "ST", False), ("NT", "NT", False), ("NT", "EL", True),
     ("NT", "SL", True), ("NL", "SL", False), ("NL", "NT", False), ("EL", "WT", True)],
)
def test_conflict_examples(a, b, expected):
    assert movements_conflict(M(a), M(b)) is expected


def test_conflict_table_against_dual_ring():
    # hand-written dual-ring compatibility table: the only compatible distinct pairs
    ok = {frozenset(x) for x in [
        ("NL", "SL"), ("NT", "ST"), ("NL", "NT"), ("SL", "ST"),
        ("EL", "WL"), ("ET", "WT"), ("EL", "ET"), ("WL", "WT"),
    ]}
    for a, b in itertools.product(MOVEMENTS, repeat=2):
        expected = a != b and frozenset((a.name, b.name)) not in ok
        assert movements_conflict(a, b) is expected
        assert movements_conflict(a, b) == movements_conflict(b, a)


def test_cross_street_always_conflicts():
    ns = [m for m in MOVEMENTS if m.name[0] in "NS"]
    ew = [m for m in MOVEMENTS if m.name[0] in "EW"]
    assert all(movements_conflict(a, b) for a in ns for b in ew)


def test_catalogue_stable_and_json():
    assert standard_phase_groups() == standard_phase_groups()
    data = json.loads(catalogue_to_json())
    assert data[1] == {"id": 2, "movements": ["NT", "ST"]}
    assert len(data) == 8


def test_movement_parse_errors():
    with pytest.raises(ValueError):
        M("XX")
    with pytest.raises(ValueError):
        M("")


def test_signal_timing():
    t = SignalTiming()
    assert (t.yellow_s, t.all_red_s, t.clearance_s) == (3.0, 2.0, 5.0)
    with pytest.raises(ValueError):
        SignalTiming(yellow_s=0)
    with pytest.raises(ValueError):
        SignalTiming(all_red_s=-1)
    assert SignalTiming(all_red_s=0).clearance_s == 3.0
