import pytest
from hypothesis import given, strategies as st

from lencap.levels import (PlanError, assign_level, custom_plan, parse_plan, plan_4_level, plan_5_level,
                           single_level)


def test_four_level_ranges():
    assert plan_4_level().to_list() == [[1, 9], [10, 14], [15, 19], [20, 25]]


def test_five_level_ranges():
    assert plan_5_level().to_list() == [[1, 9], [10, 13], [14, 17], [18, 21], [22, 25]]


@pytest.mark.parametrize("plan,length,level", [
    (plan_4_level(), 12, 2), (plan_4_level(), 9, 1), (plan_4_level(), 10, 2),
    (plan_4_level(), 7, 1), (plan_4_level(), 25, 4),
    (plan_5_level(), 13, 2), (plan_5_level(), 14, 3), (plan_5_level(), 20, 4),
])
def test_assign_level(plan, length, level):
    assert assign_level(plan, length) == level


@pytest.mark.parametrize("length", [0, 26, -3])
def test_assign_out_of_range(length):
    with pytest.raises(PlanError):
        assign_level(plan_4_level(), length)


@pytest.mark.parametrize("ranges", [
    [(1, 9), (9, 14)],      # overlap
    [(1, 9), (11, 14)],     # gap
    [(2, 9)],               # does not start at 1
    [(1, 9), (14, 10)],     # reversed
    [],
])
def test_custom_plan_rejects(ranges):
    with pytest.raises(PlanError):
        custom_plan(ranges)


def test_single_level():
    p = single_level()
    assert p.k == 1 and p.bounds(1) == (1, 25)


def test_parse_plan_forms():
    assert parse_plan("4-level") == plan_4_level()
    assert parse_plan("1-9,10-13,14-17,18-21,22-25") == plan_5_level()
    assert parse_plan([[1, 25]]) == single_level()
    with pytest.raises(PlanError):
        parse_plan("1-9,x")


def test_bounds_rejects_bad_level():
    with pytest.raises(PlanError):
        plan_4_level().bounds(5)
    with pytest.raises(PlanError):
        plan_4_level().bounds(0)


@st.composite
def cut_points(draw):
    top = draw(st.integers(1, 40))
    cuts = sorted(draw(st.sets(st.integers(1, top - 1), max_size=6))) if top > 1 else []
    bounds = [0] + cuts + [top]
    return [(a + 1, b) for a, b in zip(bounds, bounds[1:])]


@given(cut_points())
def test_every_length_lands_in_exactly_one_level(ranges):
    plan = custom_plan(ranges)
    for n in range(1, plan.max_length + 1):
        hits = [lvl for lvl in range(1, plan.k + 1) if plan.contains(lvl, n)]
        assert hits == [assign_level(plan, n)]
    for (lo, hi), (lo2, _) in zip(plan.levels, plan.levels[1:]):
        assert lo2 == hi + 1 and lo <= hi
