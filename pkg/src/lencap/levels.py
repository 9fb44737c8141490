"""Length-level plans: contiguous partitions of caption lengths."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


class PlanError(ValueError):
    """Raised for ranges that do not form a contiguous partition from 1."""


@dataclass(frozen=True)
class LengthLevelPlan:
    """Ordered, gap-free length ranges ``[(low, high), ...]`` starting at 1.

    Levels are numbered from 1 in the public API, matching how captions
    are described ("level 2 covers 10-14 tokens"). Internally the
    embedding table row for level ``l`` is ``l - 1``.
    """

    levels: tuple[tuple[int, int], ...]

    def __post_init__(self):
        problems = _validate(self.levels)
        if problems:
            raise PlanError("; ".join(problems))

    @property
    def k(self) -> int:
        return len(self.levels)

    @property
    def max_length(self) -> int:
        return self.levels[-1][1]

    def bounds(self, level: int) -> tuple[int, int]:
        if not 1 <= level <= self.k:
            raise PlanError(f"level {level} not in 1..{self.k}")
        return self.levels[level - 1]

    def low(self, level: int) -> int:
        return self.bounds(level)[0]

    def high(self, level: int) -> int:
        return self.bounds(level)[1]

    def contains(self, level: int, length: int) -> bool:
        lo, hi = self.bounds(level)
        return lo <= length <= hi

    def to_list(self) -> list[list[int]]:
        return [list(r) for r in self.levels]

    def __str__(self) -> str:
        return ", ".join(f"[{lo},{hi}]" for lo, hi in self.levels)


def _validate(ranges: Sequence[Sequence[int]]) -> list[str]:
    problems = []
    if not ranges:
        return ["a plan needs at least one level"]
    expected_low = 1
    for i, r in enumerate(ranges, start=1):
        if len(r) != 2:
            problems.append(f"level {i}: expected (low, high), got {tuple(r)}")
            continue
        lo, hi = r
        if not (isinstance(lo, int) and isinstance(hi, int)):
            problems.append(f"level {i}: bounds must be integers")
            continue
        if lo < 1:
            problems.append(f"level {i}: low bound {lo} must be positive")
        if lo > hi:
            problems.append(f"level {i}: low bound {lo} exceeds high bound {hi}")
        if lo != expected_low:
            kind = "gap" if lo > expected_low else "overlap"
            problems.append(f"level {i}: {kind}, starts at {lo} but should start at {expected_low}")
        expected_low = hi + 1
    return problems


def custom_plan(ranges: Iterable[Sequence[int]]) -> LengthLevelPlan:
    """Validate ``ranges`` and build a plan; raises :class:`PlanError`."""
    return LengthLevelPlan(tuple((int(lo), int(hi)) for lo, hi in ranges))


def plan_4_level() -> LengthLevelPlan:
    return custom_plan([(1, 9), (10, 14), (15, 19), (20, 25)])


def plan_5_level() -> LengthLevelPlan:
    return custom_plan([(1, 9), (10, 13), (14, 17), (18, 21), (22, 25)])


def single_level(max_length: int = 25) -> LengthLevelPlan:
    return custom_plan([(1, max_length)])


def assign_level(plan: LengthLevelPlan, length: int) -> int:
    """Return the 1-based level whose range contains ``length``."""
    if not 1 <= length <= plan.max_length:
        raise PlanError(f"length {length} outside [1, {plan.max_length}]")
    for i, (lo, hi) in enumerate(plan.levels, start=1):
        if lo <= length <= hi:
            return i
    raise AssertionError("unreachable for a validated plan")


NAMED_PLANS = {
    "4-level": plan_4_level,
    "5-level": plan_5_level,
    "single": single_level,
}


def parse_plan(spec) -> LengthLevelPlan:
    """Accept a plan name (``"4-level"``), ``"1-9,10-14,..."`` or a list of pairs."""
    if isinstance(spec, LengthLevelPlan):
        return spec
    if isinstance(spec, str):
        if spec in NAMED_PLANS:
            return NAMED_PLANS[spec]()
        try:
            pairs = [tuple(int(v) for v in part.split("-")) for part in spec.split(",")]
        except ValueError:
            raise PlanError(f"cannot parse plan {spec!r}") from None
        return custom_plan(pairs)
    return custom_plan(spec)
