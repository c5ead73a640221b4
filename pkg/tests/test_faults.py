import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmesh.faults import (
    CrashEntry, CrashSchedule, ScheduleError, at_round, at_time, make_preset, parse_preset,
    parse_schedule, survivor,
)


def test_parse_permanent():
    s = parse_schedule("crash 3 at-round 5")
    assert list(s.entries) == [CrashEntry(3, at_round(5))]
    assert s.entries[0].permanent


def test_parse_transient():
    s = parse_schedule("crash 2 at-time 1500 recover at-time 3000")
    (e,) = s.entries
    assert e.trigger == at_time(1500) and e.recovery == at_time(3000)
    assert not e.permanent


def test_unknown_client_reports_line():
    with pytest.raises(ScheduleError, match="line 2: unknown client 99"):
        parse_schedule("# header\ncrash 99 at-round 1", n_clients=4)


def test_comments_and_blank_lines():
    s = parse_schedule("\n# nothing\ncrash 1 at-round 2  # inline\n\n")
    assert len(s) == 1


@pytest.mark.parametrize("text", [
    "crash 1 at-round 5\ncrash 1 at-round 7",
    "crash 1 at-round 5 recover at-round 5",
    "crash 1 at-time 100 recover at-time 50",
    "crash x at-round 1",
    "crash 1 at-epoch 3",
    "crash 1 at-round",
])
def test_rejected(text):
    with pytest.raises(ScheduleError):
        parse_schedule(text, n_clients=4)


def test_text_roundtrip():
    text = "crash 0 at-round 3\ncrash 2 at-time 1500 recover at-time 3000"
    s = parse_schedule(text)
    assert parse_schedule(s.to_text()) == s
    assert CrashSchedule.from_list(s.to_list()) == s


def test_proportional_twelve_has_four_victims():
    s = make_preset("proportional", 12, seed=0)
    assert len(s) == 4 and len(survivor(s, 12)) == 8


def test_maximum_four_leaves_one():
    s = make_preset("maximum", 4, seed=1)
    assert len(s) == 3 and len(survivor(s, 4)) == 1


def test_variable_zero_is_empty():
    assert len(make_preset("variable", 8, seed=0, k=0)) == 0


def test_variable_out_of_range():
    with pytest.raises(ValueError):
        make_preset("variable", 4, seed=0, k=4)


@given(st.integers(2, 12), st.integers(0, 10_000))
def test_variable_presets_nest(n, seed):
    prev = []
    for k in range(n):
        cur = list(make_preset("variable", n, seed, k=k).entries)
        assert cur[:len(prev)] == prev
        assert len({e.victim for e in cur}) == k
        prev = cur


@given(st.integers(2, 12), st.integers(0, 10_000), st.sampled_from(["proportional", "maximum"]))
def test_presets_deterministic_and_in_window(n, seed, kind):
    a = make_preset(kind, n, seed, minimum_rounds=10, r_prime=60)
    assert a == make_preset(kind, n, seed, minimum_rounds=10, r_prime=60)
    hi = 30 if kind == "proportional" else 9
    assert all(5 <= e.trigger.value <= hi for e in a)
    assert all(e.permanent for e in a)


def test_parse_preset():
    assert parse_preset("variable:3") == ("variable", 3)
    assert parse_preset("maximum") == ("maximum", None)
    with pytest.raises(ValueError):
        parse_preset("bogus")
